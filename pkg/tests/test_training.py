import numpy as np
import pytest
import torch

from vgdm.data import PhantomSpec, Sample, generate_phantom
from vgdm.denoiser import DenoiserConfig, ShapeAuditError, init_params
from vgdm.losses import GroundTruth, LossWeights, composite_loss
from vgdm.schedule import make_linear_schedule
from vgdm.training import (
    Batch,
    Checkpoint,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    audit_checkpoint,
    checkpoint_digest,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
    training_losses,
)


def tiny_samples(config, n=2, seed=0):
    rng = np.random.default_rng(seed)
    s = config.image_size
    out = []
    for i in range(n):
        mask = np.zeros((s, s), np.uint8)
        r, c = rng.integers(1, s - 3, size=2)
        mask[r : r + 3, c : c + 2] = 1
        image = (rng.normal(size=(config.in_channels - 1, s, s)) + 2.0 * mask).astype(np.float32)
        out.append(Sample(f"s{i}", image, mask))
    return out


def small_phantom_config():
    return DenoiserConfig(image_size=16, in_channels=5, patch_size=4, embed_dim=32, depth=1,
                          num_heads=2, window_size=2, mlp_ratio=2.0)


# ---------------------------------------------------------------- optimizer step


def test_zero_learning_rate_leaves_params_bit_exact(tiny_config):
    tc = TrainConfig(steps=3, batch_size=2, learning_rate=0.0, T=10)
    state = TrainState.create(tiny_config, tc)
    before = {k: v.detach().clone() for k, v in state.params.items()}
    batch = Batch.from_samples(tiny_samples(tiny_config))
    for _ in range(3):
        train_step(state, batch, tc.schedule(), tiny_config, tc)
    for k, v in state.params.items():
        assert torch.equal(v.detach(), before[k]), k


def test_ema_with_zero_decay_tracks_params(tiny_config):
    tc = TrainConfig(steps=4, batch_size=2, learning_rate=1e-2, ema_decay=0.0, T=10)
    state = train(tiny_samples(tiny_config), tiny_config, tc)
    for k, v in state.params.items():
        assert torch.equal(state.ema[k], v.detach()), k


def test_train_step_returns_all_terms_and_moves_params(tiny_config):
    tc = TrainConfig(steps=1, batch_size=2, learning_rate=1e-2, T=10)
    state = TrainState.create(tiny_config, tc)
    head = state.params["head.weight"].detach().clone()
    values = train_step(state, Batch.from_samples(tiny_samples(tiny_config)), tc.schedule(), tiny_config, tc)
    assert set(values) == {"mse", "bce", "dice", "boundary", "total"}
    assert all(np.isfinite(list(values.values())))
    assert not torch.equal(head, state.params["head.weight"])
    assert state.step == 1


def test_non_finite_loss_names_term(tiny_config):
    tc = TrainConfig(steps=1, batch_size=2, T=10)
    samples = tiny_samples(tiny_config)
    batch = Batch.from_samples(samples)
    batch.image[0, 0, 0, 0] = float("nan")
    state = TrainState.create(tiny_config, tc)
    # the zero head hides the NaN from eps_hat, so open it up first
    with torch.no_grad():
        state.params["head.weight"].normal_(generator=torch.Generator().manual_seed(0))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, batch, tc.schedule(), tiny_config, tc)
    assert info.value.term == "mse" and info.value.step == 1
    assert "mse" in str(info.value)


def test_training_is_reproducible(tmp_path, tiny_config):
    tc = TrainConfig(steps=15, batch_size=2, learning_rate=1e-3, T=10, seed=3)
    digests = []
    for run in range(2):
        state = train(tiny_samples(tiny_config, 3), tiny_config, tc)
        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(path, Checkpoint.from_state(state, tiny_config, tc.schedule()))
        digests.append(checkpoint_digest(path))
    assert digests[0] == digests[1]


def test_training_log_columns(tmp_path, tiny_config):
    tc = TrainConfig(steps=5, batch_size=2, T=10, log_every=2)
    log = tmp_path / "log.csv"
    train(tiny_samples(tiny_config), tiny_config, tc, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == "step,mse,bce,dice,boundary,total,wall_seconds"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [2, 4, 5]


def loss_drop(seed: int) -> float:
    config = small_phantom_config()
    sample = generate_phantom(PhantomSpec.default_for(16), seed)
    tc = TrainConfig(steps=200, batch_size=4, learning_rate=1e-3, T=50, seed=seed, log_every=1)
    totals = []
    train([sample], config, tc, progress=lambda step, v: totals.append(v["total"]))
    return float(np.mean(totals[-25:]) - np.mean(totals[:25]))


def test_loss_decreases_over_200_steps():
    drops = [loss_drop(seed) for seed in range(5)]
    assert np.median(drops) < 0, drops


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


# ---------------------------------------------------------------- checkpoints


@pytest.fixture
def saved(tmp_path, tiny_config):
    tc = TrainConfig(steps=3, batch_size=2, T=10)
    state = train(tiny_samples(tiny_config), tiny_config, tc)
    ckpt = Checkpoint.from_state(state, tiny_config, tc.schedule(), {"note": "x"})
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, ckpt)
    return path, ckpt


def test_checkpoint_round_trip_bit_exact(saved):
    path, ckpt = saved
    back = load_checkpoint(path)
    assert back.config == ckpt.config and back.step == 3 and back.extra == {"note": "x"}
    assert back.schedule == ckpt.schedule and back.rng_digest == ckpt.rng_digest
    for group in ("params", "ema", "adam_m", "adam_v"):
        a, b = getattr(ckpt, group), getattr(back, group)
        assert a.keys() == b.keys()
        for k in a:
            assert np.asarray(a[k], np.float32).tobytes() == b[k].tobytes(), (group, k)
    save_checkpoint(path.with_name("b.ckpt"), back)
    assert checkpoint_digest(path) == checkpoint_digest(path.with_name("b.ckpt"))


def test_checkpoint_distinct_errors(saved):
    path, _ = saved
    raw = path.read_bytes()
    cases = {
        "trunc": (raw[:-7], CheckpointTruncatedError),
        "trunc_header": (raw[:6], CheckpointTruncatedError),
        "magic": (b"XGDM" + raw[4:], CheckpointMagicError),
        "version": (raw[:4] + (99).to_bytes(4, "little") + raw[8:], CheckpointVersionError),
    }
    for name, (data, error) in cases.items():
        p = path.with_name(name)
        p.write_bytes(data)
        with pytest.raises(error):
            load_checkpoint(p)


def test_checkpoint_audit_names_first_mismatch(tmp_path, saved, tiny_config):
    _, ckpt = saved
    wider = DenoiserConfig(**{**tiny_config.to_dict(), "embed_dim": 32})
    with pytest.raises(ShapeAuditError, match="patch_embed.weight"):
        audit_checkpoint(ckpt, wider)
    # arrays from one config stored under another config's metadata
    ckpt.config = wider
    save_checkpoint(tmp_path / "bad.ckpt", ckpt)
    with pytest.raises(ShapeAuditError, match="patch_embed.weight"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_sampling_params_prefers_ema(saved):
    _, ckpt = saved
    ema = ckpt.sampling_params()
    raw = ckpt.sampling_params(use_ema=False)
    assert all(v.dtype == torch.float32 for v in ema.values())
    assert any(not torch.equal(ema[k], raw[k]) for k in ema)


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic_exact():
    a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64)
    params = {"x": torch.tensor([0.3, -1.2], dtype=torch.float64), "y": torch.tensor([2.0], dtype=torch.float64)}
    report = finite_difference_check(lambda p: p["x"] @ a @ p["x"] + 3 * p["y"].pow(2).sum(), params, 1e-4, 1e-10)
    assert report.max_error < 1e-10 and report.passed


def composite_closure():
    rng = np.random.default_rng(0)
    mask = rng.random((4, 4)) < 0.5
    mask[0, 0] = True
    mask[3, 3] = False
    gt = GroundTruth.from_mask(mask)
    prob = torch.as_tensor(rng.uniform(0.1, 0.9, (4, 4)))
    return (lambda p: composite_loss(p["prob"], gt, LossWeights(1.0, 1.0, 1.0))), {"prob": prob}


def test_fd_composite_loss():
    fn, params = composite_closure()
    report = finite_difference_check(fn, params, 1e-5, 1e-4)
    assert report.max_error < 1e-4


def test_fd_detects_corrupted_gradient():
    fn, params = composite_closure()
    report = finite_difference_check(fn, params, 1e-5, 1e-4, grad_hook=lambda name, g: 2 * g)
    assert not report.passed and report.worst() == "prob"


def training_loss_closure(config: DenoiserConfig, seed: int = 0):
    schedule = make_linear_schedule(10)
    g = torch.Generator().manual_seed(seed)
    params = init_params(config, g, torch.float64)
    params["head.weight"].normal_(0.0, 0.3, generator=g)
    params["head.bias"].normal_(0.0, 0.1, generator=g)
    batch = Batch.from_samples(tiny_samples(config, 2, seed), torch.float64)
    t = torch.tensor([3, 7])
    eps = torch.randn((2, 1, config.image_size, config.image_size), generator=g, dtype=torch.float64)
    weights = LossWeights(1.0, 1.0, 0.01)

    def fn(p):
        return training_losses(p, batch, t, eps, schedule, config, weights)["total"]

    return fn, params


def test_fd_training_loss_one_block_8x8(tiny_config):
    assert tiny_config.depth == 1 and tiny_config.image_size == 8
    fn, params = training_loss_closure(tiny_config)
    report = finite_difference_check(fn, params, 1e-6, 1e-3, max_entries=12)
    assert report.passed, (report.worst(), report.max_error)
