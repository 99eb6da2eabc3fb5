"""Windowed-attention transformer that predicts the injected noise on the mask channel.

Parameters live in a flat ``dict[str, Tensor]`` so checkpoints, the shape audit and
gradient checks can address every array by name. All ops accept an optional leading
batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F

Params = dict[str, torch.Tensor]
AttentionHook = Callable[[torch.Tensor], None]


class ShapeAuditError(ValueError):
    """A parameter array is missing or has the wrong shape for the config."""


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 5
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    window_size: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        for name in ("image_size", "in_channels", "patch_size", "embed_dim", "depth", "num_heads", "window_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.mlp_ratio <= 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.grid_size % self.window_size:
            raise ValueError(f"token grid {self.grid_size} not divisible by window_size {self.window_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for the timestep embedding")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def block_shift(self, index: int) -> int:
        return 0 if index % 2 == 0 else self.window_size // 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (..., grid_h * grid_w, dim)
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ValueError(f"{self.tokens.shape[-2]} tokens do not fill a {self.grid_h}x{self.grid_w} grid")


def param_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with the shape the config implies, in canonical order."""
    d, p, h = config.embed_dim, config.patch_size, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, config.in_channels * p * p),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_tokens, d),
    }
    for i in range(config.depth):
        b = f"blocks.{i}."
        shapes[b + "time_proj.weight"] = (d, d)
        shapes[b + "time_proj.bias"] = (d,)
        shapes[b + "norm1.weight"] = (d,)
        shapes[b + "norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[b + f"attn.{proj}.weight"] = (d, d)
            shapes[b + f"attn.{proj}.bias"] = (d,)
        shapes[b + "norm2.weight"] = (d,)
        shapes[b + "norm2.bias"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (h, d)
        shapes[b + "mlp.fc1.bias"] = (h,)
        shapes[b + "mlp.fc2.weight"] = (d, h)
        shapes[b + "mlp.fc2.bias"] = (d,)
    shapes["head.weight"] = (p * p, d)
    shapes["head.bias"] = (p * p,)
    return shapes


def parameter_count(config: DenoiserConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def audit_params(params: Params, config: DenoiserConfig) -> None:
    """Raise :class:`ShapeAuditError` naming the first array that disagrees with ``config``."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeAuditError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ShapeAuditError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ShapeAuditError(f"unexpected parameter {extra[0]!r}")


def init_params(
    config: DenoiserConfig,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Params:
    """Projections ~ N(0, 1/fan_in); norms at (1, 0); positional embedding N(0, 0.02^2); zero head."""
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("head."):
            value = torch.zeros(shape, dtype=dtype)
        elif ".norm" in name:
            value = torch.ones(shape, dtype=dtype) if name.endswith("weight") else torch.zeros(shape, dtype=dtype)
        elif name == "pos_embed":
            value = 0.02 * torch.randn(shape, generator=generator, dtype=dtype)
        elif name.endswith("weight"):
            value = torch.randn(shape, generator=generator, dtype=dtype) / math.sqrt(shape[1])
        else:
            value = torch.zeros(shape, dtype=dtype)
        params[name] = value
    return params


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``[..., C, H, W]`` -> ``[..., (H/p)(W/p), C p p]`` with patches in raster order."""
    *lead, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    n = len(lead)
    x = image.reshape(*lead, c, h // p, p, w // p, p)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)  # ..., h/p, w/p, C, p, p
    return x.reshape(*lead, (h // p) * (w // p), c * p * p)


def unpatchify(rows: torch.Tensor, patch_size: int, image_size: int, channels: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify`."""
    p = patch_size
    g = image_size // p
    *lead, n, length = rows.shape
    if image_size % p or n != g * g or length != channels * p * p:
        raise ValueError(
            f"rows of shape {(n, length)} do not match image_size={image_size}, "
            f"patch_size={p}, channels={channels}"
        )
    k = len(lead)
    x = rows.reshape(*lead, g, g, channels, p, p)
    x = x.permute(*range(k), k + 2, k, k + 3, k + 1, k + 4)  # ..., C, g, p, g, p
    return x.reshape(*lead, channels, image_size, image_size)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal encoding: ``[sin(t w_k)..., cos(t w_k)...]`` with ``w_k = max_period^(-2k/dim)``.

    ``t`` may be a scalar or a 1-D tensor of timesteps; the result has a trailing
    axis of length ``dim``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if (t < 0).any():
        raise ValueError("timestep must be non-negative")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = max_period ** (-2.0 * k / dim)
    angles = t[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _partition(grid: torch.Tensor, window_size: int, shift: int) -> torch.Tensor:
    # grid: (B, G, G, D) -> (B, nW, w*w, D)
    b, g, _, d = grid.shape
    w = window_size
    if shift:
        grid = torch.roll(grid, shifts=(-shift, -shift), dims=(1, 2))
    x = grid.reshape(b, g // w, w, g // w, w, d).transpose(2, 3)
    return x.reshape(b, (g // w) ** 2, w * w, d)


def _merge(windows: torch.Tensor, window_size: int, shift: int, grid_size: int) -> torch.Tensor:
    b, _, _, d = windows.shape
    w, n = window_size, grid_size // window_size
    x = windows.reshape(b, n, n, w, w, d).transpose(2, 3).reshape(b, grid_size, grid_size, d)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


def _check_window(side: int, window_size: int, shift: int) -> None:
    if window_size < 1 or side % window_size:
        raise ValueError(f"grid side {side} not divisible by window size {window_size}")
    if not 0 <= shift < side:
        raise ValueError(f"shift {shift} outside [0, {side})")


def window_partition(grid: TokenGrid, window_size: int, shift: int = 0) -> torch.Tensor:
    """Roll the grid by ``(-shift, -shift)`` and tile it into raster-ordered windows.

    Returns ``[..., num_windows, window_size**2, dim]``.
    """
    if grid.grid_h != grid.grid_w:
        raise ValueError("only square token grids are supported")
    _check_window(grid.grid_h, window_size, shift)
    *lead, _, d = grid.tokens.shape
    x = grid.tokens.reshape(-1, grid.grid_h, grid.grid_w, d)
    out = _partition(x, window_size, shift)
    return out.reshape(*lead, *out.shape[1:])


def window_merge(windows: torch.Tensor, window_size: int, shift: int = 0) -> TokenGrid:
    """Inverse of :func:`window_partition`, including the un-shift."""
    *lead, nw, area, d = windows.shape
    per_side = math.isqrt(nw)
    if per_side * per_side != nw or area != window_size * window_size:
        raise ValueError(f"{nw} windows of {area} tokens cannot tile a square grid with window {window_size}")
    side = per_side * window_size
    _check_window(side, window_size, shift)
    x = _merge(windows.reshape(-1, nw, area, d), window_size, shift, side)
    return TokenGrid(x.reshape(*lead, side * side, d), side, side)


def attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    hook: AttentionHook | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query dim {queries.shape[-1]} != key dim {keys.shape[-1]}")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    if hook is not None:
        hook(weights.detach())
    return weights @ values


def _linear(x: torch.Tensor, params: Params, name: str) -> torch.Tensor:
    return F.linear(x, params[name + ".weight"], params[name + ".bias"])


def _window_attention(
    x: torch.Tensor, params: Params, prefix: str, config: DenoiserConfig, shift: int, hook: AttentionHook | None
) -> torch.Tensor:
    # x: (B, N, D) normalized tokens
    b, n, d = x.shape
    g, w, h = config.grid_size, config.window_size, config.num_heads
    windows = _partition(x.reshape(b, g, g, d), w, shift).reshape(-1, w * w, d)

    def heads(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(t.shape[0], w * w, h, d // h).transpose(1, 2)

    q = heads(_linear(windows, params, prefix + "attn.q"))
    k = heads(_linear(windows, params, prefix + "attn.k"))
    v = heads(_linear(windows, params, prefix + "attn.v"))
    out = attention(q, k, v, hook).transpose(1, 2).reshape(-1, w * w, d)
    out = _linear(out, params, prefix + "attn.out")
    merged = _merge(out.reshape(b, -1, w * w, d), w, shift, g)
    return merged.reshape(b, n, d)


def encode(
    x_t: torch.Tensor,
    condition: torch.Tensor,
    t,
    params: Params,
    config: DenoiserConfig,
    hook: AttentionHook | None = None,
    use_pos_embed: bool = True,
) -> torch.Tensor:
    """Run the encoder stack and return final token features ``(B, N, D)``."""
    batched = x_t.dim() == 4
    if not batched:
        x_t, condition = x_t[None], condition[None]
    s = config.image_size
    if x_t.shape[1:] != (1, s, s):
        raise ValueError(f"x_t has shape {tuple(x_t.shape[1:])}, expected (1, {s}, {s})")
    if condition.shape[1:] != (config.in_channels - 1, s, s) or condition.shape[0] != x_t.shape[0]:
        raise ValueError(
            f"condition has shape {tuple(condition.shape)}, expected (..., {config.in_channels - 1}, {s}, {s})"
        )
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    if (t < 0).any():
        raise ValueError("negative timestep")

    dtype = params["patch_embed.weight"].dtype
    inp = torch.cat([x_t, condition], dim=1).to(dtype)
    tokens = _linear(patchify(inp, config.patch_size), params, "patch_embed")
    if use_pos_embed:
        tokens = tokens + params["pos_embed"]
    temb = timestep_embedding(t, config.embed_dim).to(dtype)[:, None, :]

    d = config.embed_dim
    for i in range(config.depth):
        b = f"blocks.{i}."
        tokens = tokens + _linear(temb, params, b + "time_proj")
        normed = F.layer_norm(tokens, (d,), params[b + "norm1.weight"], params[b + "norm1.bias"])
        tokens = tokens + _window_attention(normed, params, b, config, config.block_shift(i), hook)
        normed = F.layer_norm(tokens, (d,), params[b + "norm2.weight"], params[b + "norm2.bias"])
        hidden = F.gelu(_linear(normed, params, b + "mlp.fc1"))
        tokens = tokens + _linear(hidden, params, b + "mlp.fc2")
    return tokens


def decode_to_logits(
    features: TokenGrid, weight: torch.Tensor, bias: torch.Tensor, config: DenoiserConfig
) -> torch.Tensor:
    """Per-token linear map to ``patch_size**2`` pixels, reassembled to ``[..., H, W]``."""
    p = config.patch_size
    if features.grid_h != config.grid_size or features.grid_w != config.grid_size:
        raise ValueError(f"token grid {features.grid_h}x{features.grid_w} does not match config {config.grid_size}")
    if tuple(weight.shape) != (p * p, features.tokens.shape[-1]) or tuple(bias.shape) != (p * p,):
        raise ValueError(f"head weight {tuple(weight.shape)} incompatible with features")
    rows = F.linear(features.tokens, weight, bias)
    return unpatchify(rows, p, config.image_size, 1)[..., 0, :, :]


def denoiser_forward(
    x_t: torch.Tensor,
    condition: torch.Tensor,
    t,
    params: Params,
    config: DenoiserConfig,
    hook: AttentionHook | None = None,
) -> tuple[torch.Tensor, TokenGrid]:
    """Predict the noise on the mask channel.

    Returns ``(eps_hat, features)`` where ``eps_hat`` has the shape of ``x_t``
    and ``features`` is the pre-head token grid.
    """
    tokens = encode(x_t, condition, t, params, config, hook)
    g = config.grid_size
    features = TokenGrid(tokens, g, g)
    eps_hat = decode_to_logits(features, params["head.weight"], params["head.bias"], config)[:, None]
    if x_t.dim() == 3:
        eps_hat = eps_hat[0]
        features = TokenGrid(tokens[0], g, g)
    return eps_hat, features
