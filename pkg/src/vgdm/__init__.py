"""Transformer-backed denoising diffusion for binary tumor segmentation."""

from .denoiser import DenoiserConfig, TokenGrid, denoiser_forward, init_params
from .losses import GroundTruth, LossWeights, composite_loss
from .sampler import MaskPrediction, sample_mask
from .schedule import NoiseSchedule, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "DenoiserConfig",
    "GroundTruth",
    "LossWeights",
    "MaskPrediction",
    "NoiseSchedule",
    "TokenGrid",
    "composite_loss",
    "denoiser_forward",
    "init_params",
    "make_linear_schedule",
    "sample_mask",
]
