"""Ancestral reverse-process sampling from a trained denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .denoiser import DenoiserConfig, Params, denoiser_forward
from .schedule import NoiseSchedule, _index, posterior_mean_from_eps

# (x_t, t) -> eps_hat; lets tests inject an oracle in place of the network
EpsModel = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class MaskPrediction:
    prob: np.ndarray
    mask: np.ndarray
    threshold: float


def mask_to_signal(mask) -> torch.Tensor:
    """Binary mask {0, 1} -> diffusion space {-1, +1}."""
    return torch.as_tensor(np.asarray(mask), dtype=torch.float32) * 2.0 - 1.0


def signal_to_prob(x):
    """Logistic of half the final state, so the {-1, +1} targets map to ~0.27/0.73 and 0 maps to 0.5."""
    return torch.sigmoid(x / 2.0)


def ddpm_sample_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, noise=None):
    """One ancestral step: posterior mean plus ``sqrt(beta_tilde_t) * noise``.

    At ``t == 1`` the posterior variance is zero and ``noise`` is ignored.
    """
    _index(t, schedule.T)
    mean = posterior_mean_from_eps(x_t, t, eps_hat, schedule)
    if t == 1 or noise is None:
        return mean
    if tuple(noise.shape) != tuple(x_t.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != x_t shape {tuple(x_t.shape)}")
    return mean + schedule.posterior_variance(t) ** 0.5 * noise


def reverse_chain(
    eps_model: EpsModel,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    x_T: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Iterate the reverse chain from ``t = T`` down to ``t = 1`` and return the final state."""
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T
    for t in range(schedule.T, 0, -1):
        eps_hat = eps_model(x, t)
        noise = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
        x = ddpm_sample_step(x, t, eps_hat, schedule, noise)
    return x


def threshold_prob(prob: np.ndarray, threshold: float) -> np.ndarray:
    return (prob >= threshold).astype(np.uint8)


@torch.no_grad()
def sample_mask(
    condition,
    params: Params,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    seed: int = 0,
    threshold: float = 0.5,
) -> MaskPrediction:
    """Sample a segmentation for one ``[C, H, W]`` conditioning image."""
    dtype = params["patch_embed.weight"].dtype
    cond = torch.as_tensor(np.asarray(condition), dtype=dtype)
    s = config.image_size
    if cond.shape != (config.in_channels - 1, s, s):
        raise ValueError(f"condition shape {tuple(cond.shape)} does not match config ({config.in_channels - 1}, {s}, {s})")
    generator = torch.Generator().manual_seed(int(seed))

    def eps_model(x: torch.Tensor, t: int) -> torch.Tensor:
        return denoiser_forward(x, cond, t, params, config)[0]

    x0 = reverse_chain(eps_model, (1, s, s), schedule, generator, dtype=dtype)
    prob = signal_to_prob(x0[0]).double().numpy()
    return MaskPrediction(prob=prob, mask=threshold_prob(prob, threshold), threshold=float(threshold))
