"""Segmentation losses: BCE, soft Dice, signed-distance boundary term and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

EPS_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_boundary: float = 0.01

    def __post_init__(self) -> None:
        w = (self.lambda_bce, self.lambda_dice, self.lambda_boundary)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class GroundTruth:
    mask: np.ndarray
    sdt: np.ndarray
    degenerate: bool = False

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> GroundTruth:
        mask = np.asarray(mask).astype(bool)
        return cls(mask.astype(np.uint8), signed_distance_transform(mask), degenerate=mask.all() or not mask.any())


def signed_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest opposite-class pixel, negated inside.

    A mask with only one class has no opposite class; every value is then set to
    ``H + W`` (see :attr:`GroundTruth.degenerate`).
    """
    mask = np.asarray(mask).astype(bool)
    if mask.all() or not mask.any():
        return np.full(mask.shape, float(sum(mask.shape)), dtype=np.float64)
    # distance_transform_edt measures distance from each nonzero pixel to the nearest zero pixel
    outside = ndimage.distance_transform_edt(~mask)
    inside = ndimage.distance_transform_edt(mask)
    return np.where(mask, -inside, outside).astype(np.float64)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _pair(prob, gt) -> tuple[torch.Tensor, torch.Tensor]:
    prob = _as_tensor(prob)
    gt = _as_tensor(gt, prob).to(prob.dtype)
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(gt.shape)}")
    return prob, gt


def _reduce_dims(x: torch.Tensor, batched: bool) -> tuple[int, ...]:
    return tuple(range(1, x.dim())) if batched else tuple(range(x.dim()))


def bce_loss(prob, gt, batched: bool = False) -> torch.Tensor:
    """Mean binary cross entropy with ``prob`` clamped to ``[eps, 1 - eps]``."""
    prob, gt = _pair(prob, gt)
    p = prob.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)
    loss = -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p))
    return loss.mean(dim=_reduce_dims(loss, batched))


def dice_loss(prob, gt, smooth: float = 1.0, batched: bool = False) -> torch.Tensor:
    """Soft Dice ``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)``."""
    prob, gt = _pair(prob, gt)
    dims = _reduce_dims(prob, batched)
    inter = (prob * gt).sum(dim=dims)
    denom = prob.sum(dim=dims) + gt.sum(dim=dims)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def boundary_loss(prob, sdt, batched: bool = False) -> torch.Tensor:
    """Signed-distance weighted regional term ``mean(sdt * prob)``."""
    if isinstance(sdt, GroundTruth):
        sdt = sdt.sdt
    prob, sdt = _pair(prob, sdt)
    weighted = sdt * prob
    return weighted.mean(dim=_reduce_dims(weighted, batched))


def composite_terms(prob, gt: GroundTruth | tuple, smooth: float = 1.0, batched: bool = False):
    """The three loss components, unweighted, as ``(bce, dice, boundary)``.

    ``gt`` is a :class:`GroundTruth` or a ``(mask, sdt)`` pair of arrays/tensors.
    """
    mask, sdt = (gt.mask, gt.sdt) if isinstance(gt, GroundTruth) else gt
    bce = bce_loss(prob, mask, batched)
    dice = dice_loss(prob, mask, smooth, batched)
    boundary = boundary_loss(prob, sdt, batched)
    return bce, dice, boundary


def composite_loss(prob, gt: GroundTruth | tuple, w: LossWeights, smooth: float = 1.0) -> torch.Tensor:
    """``lambda_bce * BCE + lambda_dice * Dice + lambda_boundary * Boundary``."""
    bce, dice, boundary = composite_terms(prob, gt, smooth)
    return w.lambda_bce * bce + w.lambda_dice * dice + w.lambda_boundary * boundary
