"""Training loop, checkpoint container and finite-difference gradient harness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import DenoiserConfig, Params, ShapeAuditError, audit_params, denoiser_forward, init_params
from .losses import GroundTruth, LossWeights, composite_terms
from .sampler import signal_to_prob
from .schedule import NoiseSchedule, make_linear_schedule, predict_x0_from_eps, q_sample

CHECKPOINT_MAGIC = b"VGDM"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["step", "mse", "bce", "dice", "boundary", "total", "wall_seconds"]
LOSS_TERMS = ("mse", "bce", "dice", "boundary", "total")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} loss ({value}) at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 2e-4
    ema_decay: float = 0.995
    weights: LossWeights = field(default_factory=LossWeights)
    dice_smooth: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class Batch:
    """Stacked tensors for a set of samples: masks in {-1, +1} signal space, precomputed SDTs."""

    image: torch.Tensor  # (B, C, H, W)
    mask: torch.Tensor  # (B, H, W) in {0, 1}
    sdt: torch.Tensor  # (B, H, W)

    @classmethod
    def from_samples(cls, samples: Sequence, dtype: torch.dtype = torch.float32) -> Batch:
        gts = [GroundTruth.from_mask(s.mask) for s in samples]
        return cls(
            image=torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype),
            mask=torch.as_tensor(np.stack([g.mask for g in gts]), dtype=dtype),
            sdt=torch.as_tensor(np.stack([g.sdt for g in gts]), dtype=dtype),
        )

    def select(self, index: torch.Tensor) -> Batch:
        return Batch(self.image[index], self.mask[index], self.sdt[index])

    def to(self, dtype: torch.dtype) -> Batch:
        return Batch(self.image.to(dtype), self.mask.to(dtype), self.sdt.to(dtype))


def training_losses(
    params: Params,
    batch: Batch,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    weights: LossWeights,
    smooth: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Noise-prediction MSE plus the composite mask loss on the implied clean estimate.

    ``eps`` has shape ``(B, 1, H, W)``; ``t`` holds one timestep per item.
    """
    x0 = (batch.mask * 2.0 - 1.0)[:, None]
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat, _ = denoiser_forward(x_t, batch.image, t, params, config)
    mse = torch.mean((eps_hat - eps) ** 2)
    x0_hat = predict_x0_from_eps(x_t, t, eps_hat, schedule)
    prob = signal_to_prob(x0_hat[:, 0])
    bce, dice, boundary = composite_terms(prob, (batch.mask, batch.sdt), smooth, batched=True)
    bce, dice, boundary = bce.mean(), dice.mean(), boundary.mean()
    total = mse + weights.lambda_bce * bce + weights.lambda_dice * dice + weights.lambda_boundary * boundary
    return {"mse": mse, "bce": bce, "dice": dice, "boundary": boundary, "total": total}


@dataclass
class TrainState:
    params: Params
    optimizer: torch.optim.Adam
    ema: Params
    generator: torch.Generator
    step: int = 0

    @classmethod
    def create(cls, config: DenoiserConfig, train_config: TrainConfig, dtype: torch.dtype = torch.float32) -> TrainState:
        generator = torch.Generator().manual_seed(train_config.seed)
        params = init_params(config, generator, dtype)
        for p in params.values():
            p.requires_grad_(True)
        optimizer = torch.optim.Adam(
            list(params.values()), lr=train_config.learning_rate, betas=(0.9, 0.999), weight_decay=0.0, foreach=False
        )
        ema = {k: v.detach().clone() for k, v in params.items()}
        return cls(params, optimizer, ema, generator)

    def rng_digest(self) -> str:
        return hashlib.sha256(self.generator.get_state().numpy().tobytes()).hexdigest()[:16]

    def moments(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        m, v = {}, {}
        for name, p in self.params.items():
            state = self.optimizer.state.get(p)
            if state:
                m[name] = state["exp_avg"].detach().numpy()
                v[name] = state["exp_avg_sq"].detach().numpy()
        return m, v


def train_step(
    state: TrainState,
    batch: Batch,
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    train_config: TrainConfig,
) -> dict[str, float]:
    """One Adam step on a batch; updates ``state`` in place and returns the loss terms."""
    b = batch.image.shape[0]
    s = config.image_size
    t = torch.randint(1, schedule.T + 1, (b,), generator=state.generator)
    eps = torch.randn((b, 1, s, s), generator=state.generator, dtype=batch.image.dtype)
    state.optimizer.zero_grad(set_to_none=True)
    losses = training_losses(state.params, batch, t, eps, schedule, config, train_config.weights, train_config.dice_smooth)
    values = {k: float(v.detach()) for k, v in losses.items()}
    for term in LOSS_TERMS:
        if not math.isfinite(values[term]):
            raise NonFiniteLossError(term, state.step + 1, values[term])
    losses["total"].backward()
    state.optimizer.step()
    decay = train_config.ema_decay
    with torch.no_grad():
        for name, p in state.params.items():
            state.ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    state.step += 1
    return values


def train(
    samples: Sequence,
    config: DenoiserConfig,
    train_config: TrainConfig,
    log_path: str | Path | None = None,
    progress: Callable[[int, dict[str, float]], None] | None = None,
) -> TrainState:
    """Run ``train_config.steps`` optimization steps over ``samples``."""
    schedule = train_config.schedule()
    state = TrainState.create(config, train_config)
    data = Batch.from_samples(samples)
    n = len(samples)
    log_rows = []
    start = time.perf_counter()
    for _ in range(train_config.steps):
        if train_config.batch_size <= n:
            index = torch.randperm(n, generator=state.generator)[: train_config.batch_size]
        else:
            index = torch.randint(0, n, (train_config.batch_size,), generator=state.generator)
        values = train_step(state, data.select(index), schedule, config, train_config)
        if state.step % train_config.log_every == 0 or state.step == train_config.steps:
            row = {"step": state.step, **values, "wall_seconds": time.perf_counter() - start}
            log_rows.append(row)
            if progress is not None:
                progress(state.step, values)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in log_rows:
                writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return state


# --- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: DenoiserConfig
    schedule: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    step: int = 0
    rng_digest: str = ""
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainState, config: DenoiserConfig, schedule: NoiseSchedule, extra: dict | None = None) -> Checkpoint:
        m, v = state.moments()
        return cls(
            config=config,
            schedule=schedule.settings(),
            params={k: p.detach().numpy() for k, p in state.params.items()},
            ema={k: p.numpy() for k, p in state.ema.items()},
            adam_m=m or None,
            adam_v=v or None,
            step=state.step,
            rng_digest=state.rng_digest(),
            extra=extra or {},
        )

    def sampling_params(self, use_ema: bool = True) -> Params:
        """Float32 tensors for inference, EMA shadow when available."""
        source = self.ema if use_ema and self.ema is not None else self.params
        return {k: torch.as_tensor(np.asarray(v, dtype=np.float32)) for k, v in source.items()}

    def noise_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.schedule["T"], self.schedule["beta_start"], self.schedule["beta_end"])

    def parameter_count(self) -> int:
        return sum(int(np.prod(v.shape)) for v in self.params.values())


_GROUPS = ("param", "ema", "adam_m", "adam_v")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule,
        "step": ckpt.step,
        "rng_digest": ckpt.rng_digest,
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", ckpt.version, len(meta_bytes)) + meta_bytes
    records = []
    for group, arrays in zip(_GROUPS, (ckpt.params, ckpt.ema, ckpt.adam_m, ckpt.adam_v)):
        for name, arr in (arrays or {}).items():
            records.append((f"{group}/{name}", np.asarray(arr)))
    out += struct.pack("<I", len(records))
    for name, arr in records:
        encoded = name.encode()
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a VGDM checkpoint")
    r = _Reader(raw)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} not recognized")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * math.prod(shape):
            raise CheckpointError(f"record {name!r}: payload of {nbytes} bytes does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").astype(np.float32).reshape(shape)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown record group in {name!r}")
        groups[group][key] = arr
    config = DenoiserConfig(**meta["config"])
    ckpt = Checkpoint(
        config=config,
        schedule=meta["schedule"],
        params=groups["param"],
        ema=groups["ema"] or None,
        adam_m=groups["adam_m"] or None,
        adam_v=groups["adam_v"] or None,
        step=meta["step"],
        rng_digest=meta["rng_digest"],
        extra=meta.get("extra", {}),
        version=version,
    )
    audit_checkpoint(ckpt)
    return ckpt


def audit_checkpoint(ckpt: Checkpoint, config: DenoiserConfig | None = None) -> None:
    """Shape-audit every parameter set in ``ckpt`` against ``config`` (default: its own)."""
    config = config or ckpt.config
    for label, arrays in (("params", ckpt.params), ("ema", ckpt.ema)):
        if arrays is None:
            continue
        try:
            audit_params(arrays, config)
        except ShapeAuditError as exc:
            raise ShapeAuditError(f"{label}: {exc}") from None


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- finite differences ---------------------------------------------------------------


@dataclass
class FDReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> str:
        return max(self.errors, key=self.errors.get)


def finite_difference_check(
    loss_fn: Callable[[Params], torch.Tensor],
    params: Params,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    grad_hook: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
    max_entries: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> FDReport:
    """Compare autograd gradients with central differences, per named parameter array.

    The error for an array is ``max|g - g_fd| / max(max|g|, max|g_fd|, floor)``; the
    floor keeps arrays whose true gradient is zero from dividing rounding noise by
    zero. ``max_entries`` subsamples large arrays. Parameters should be float64.
    """
    work = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(work)
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(work[k])).detach() for k, g in zip(work, grads)
    }
    if grad_hook is not None:
        analytic = {k: grad_hook(k, g) for k, g in analytic.items()}

    rng = np.random.default_rng(seed)
    probe = {k: v.detach().clone() for k, v in params.items()}
    errors = {}
    with torch.no_grad():
        for name, value in probe.items():
            flat = value.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and idx.size > max_entries:
                idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn(probe))
                flat[i] = orig - step
                down = float(loss_fn(probe))
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            a = analytic[name].reshape(-1).numpy()[idx]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
            errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return FDReport(errors, tolerance)
