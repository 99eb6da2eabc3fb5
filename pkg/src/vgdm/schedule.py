"""Diffusion variance schedules and the closed-form Gaussian quantities of the chain.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar_0 = 1`` is an
internal sentinel. Every constant is held in float64; the array operations accept
numpy arrays or torch tensors and keep the caller's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_variances: np.ndarray = field(repr=False)
    beta_start: float = 0.0
    beta_end: float = 0.0

    def settings(self) -> dict[str, Any]:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def beta(self, t: int) -> float:
        return float(self.betas[_index(t, self.T)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[_index(t, self.T)])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[_index(t, self.T)])

    def posterior_variance(self, t: int) -> float:
        return float(self.posterior_variances[_index(t, self.T)])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ScheduleError(f"beta bounds must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_start > beta_end:
        raise ScheduleError(f"beta_start {beta_start} exceeds beta_end {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)
    posterior[0] = 0.0
    for arr in (betas, alphas, alpha_bars, posterior):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=posterior,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def _index(t: int, T: int) -> int:
    if int(t) != t or not 1 <= t <= T:
        raise ScheduleError(f"timestep {t!r} outside 1..{T}")
    return int(t) - 1


def _coef(values: np.ndarray, t: Any, like: Any, T: int) -> Any:
    """Gather ``values[t-1]`` shaped to broadcast against ``like``.

    ``t`` is a scalar timestep or a 1-D batch of timesteps matching ``like``'s
    leading dimension.
    """
    if _is_torch(t):
        t = t.detach().cpu().numpy()
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        c: Any = values[_index(int(t_arr), T)]
        if _is_torch(like):
            return float(c)
        return np.float64(c)
    if not np.issubdtype(t_arr.dtype, np.integer) or t_arr.min() < 1 or t_arr.max() > T:
        raise ScheduleError(f"timesteps outside 1..{T}")
    c = values[t_arr - 1].reshape((-1,) + (1,) * (like.ndim - 1))
    if _is_torch(like):
        import torch

        return torch.as_tensor(c, dtype=like.dtype, device=like.device)
    return c


def _is_torch(x: Any) -> bool:
    return type(x).__module__.startswith("torch")


def _check_shapes(a: Any, b: Any) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: Any, t: Any, eps: Any, schedule: NoiseSchedule) -> Any:
    """Draw from q(x_t | x_0): ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    _check_shapes(x0, eps)
    abar = schedule.alpha_bars
    signal = _coef(np.sqrt(abar), t, x0, schedule.T)
    noise = _coef(np.sqrt(1.0 - abar), t, x0, schedule.T)
    return signal * x0 + noise * eps


def forward_step(x_prev: Any, t: Any, eps: Any, schedule: NoiseSchedule) -> Any:
    """One step of the forward kernel q(x_t | x_{t-1})."""
    _check_shapes(x_prev, eps)
    keep = _coef(np.sqrt(schedule.alphas), t, x_prev, schedule.T)
    noise = _coef(np.sqrt(schedule.betas), t, x_prev, schedule.T)
    return keep * x_prev + noise * eps


def predict_x0_from_eps(x_t: Any, t: Any, eps_hat: Any, schedule: NoiseSchedule) -> Any:
    """Invert the closed-form marginal for the clean signal given predicted noise."""
    _check_shapes(x_t, eps_hat)
    abar = schedule.alpha_bars
    inv_signal = _coef(1.0 / np.sqrt(abar), t, x_t, schedule.T)
    noise = _coef(np.sqrt(1.0 - abar), t, x_t, schedule.T)
    return (x_t - noise * eps_hat) * inv_signal


def posterior_mean_from_eps(x_t: Any, t: Any, eps_hat: Any, schedule: NoiseSchedule) -> Any:
    """Reverse-step mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``."""
    _check_shapes(x_t, eps_hat)
    eps_coef = _coef(schedule.betas / np.sqrt(1.0 - schedule.alpha_bars), t, x_t, schedule.T)
    inv_sqrt_alpha = _coef(1.0 / np.sqrt(schedule.alphas), t, x_t, schedule.T)
    return (x_t - eps_coef * eps_hat) * inv_sqrt_alpha


def posterior_mean_from_x0(x_t: Any, t: int, x0: Any, schedule: NoiseSchedule) -> Any:
    """Mean of q(x_{t-1} | x_t, x_0) in its two-coefficient form."""
    _check_shapes(x_t, x0)
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    c0 = abar_prev**0.5 * beta / (1.0 - abar)
    ct = schedule.alpha(t) ** 0.5 * (1.0 - abar_prev) / (1.0 - abar)
    return c0 * x0 + ct * x_t
