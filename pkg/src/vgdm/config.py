"""Flat ``key = value`` run configuration with a declared schema.

Lines starting with ``#`` (and trailing ``# ...`` comments) are ignored. Unknown
keys, missing required keys and badly typed values raise :class:`ConfigError`
naming the key.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import PhantomSpec
from .denoiser import DenoiserConfig
from .losses import LossWeights
from .training import TrainConfig

REQUIRED = object()

SCHEMA: dict[str, tuple[type, Any]] = {
    # denoiser
    "image_size": (int, None),
    "patch_size": (int, 4),
    "embed_dim": (int, 64),
    "depth": (int, 4),
    "num_heads": (int, 4),
    "window_size": (int, 4),
    "mlp_ratio": (float, 4.0),
    # schedule
    "T": (int, REQUIRED),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 0.02),
    # optimization
    "steps": (int, REQUIRED),
    "batch_size": (int, 8),
    "learning_rate": (float, 2e-4),
    "ema_decay": (float, 0.995),
    "seed": (int, REQUIRED),
    "log_every": (int, 50),
    # losses
    "lambda_bce": (float, 1.0),
    "lambda_dice": (float, 1.0),
    "lambda_boundary": (float, 0.01),
    "dice_smooth": (float, 1.0),
    # phantoms
    "phantom_size": (int, 32),
    "phantom_channels": (int, 4),
    "phantom_tumor_min": (int, 1),
    "phantom_tumor_max": (int, 2),
    "phantom_radius_min": (float, None),
    "phantom_radius_max": (float, None),
    "phantom_noise_sigma": (float, 0.1),
    # paths
    "data": (str, None),
    "out": (str, None),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _convert(key: str, kind: type, text: str) -> Any:
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got {text!r}") from None
    return text


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        values: dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(line, f"line {lineno} is not key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(key, "unknown key")
            if key in values:
                raise ConfigError(key, "given more than once")
            values[key] = _convert(key, SCHEMA[key][0], value)
        for key, (_, default) in SCHEMA.items():
            if key not in values:
                if default is REQUIRED:
                    raise ConfigError(key, "required key missing")
                values[key] = default
        return cls(values)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        return cls.parse(text)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def denoiser_config(self, image_size: int, in_channels: int) -> DenoiserConfig:
        if self["image_size"] is not None and self["image_size"] != image_size:
            raise ConfigError("image_size", f"{self['image_size']} does not match data size {image_size}")
        try:
            return DenoiserConfig(
                image_size=image_size,
                in_channels=in_channels,
                patch_size=self["patch_size"],
                embed_dim=self["embed_dim"],
                depth=self["depth"],
                num_heads=self["num_heads"],
                window_size=self["window_size"],
                mlp_ratio=self["mlp_ratio"],
            )
        except ValueError as exc:
            raise ConfigError("denoiser", str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            weights = LossWeights(self["lambda_bce"], self["lambda_dice"], self["lambda_boundary"])
            return TrainConfig(
                steps=self["steps"],
                batch_size=self["batch_size"],
                learning_rate=self["learning_rate"],
                ema_decay=self["ema_decay"],
                weights=weights,
                dice_smooth=self["dice_smooth"],
                T=self["T"],
                beta_start=self["beta_start"],
                beta_end=self["beta_end"],
                seed=self["seed"],
                log_every=self["log_every"],
            )
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None

    def phantom_spec(self) -> PhantomSpec:
        base = PhantomSpec.default_for(self["phantom_size"], self["phantom_channels"])
        radius = (
            self["phantom_radius_min"] if self["phantom_radius_min"] is not None else base.radius_range[0],
            self["phantom_radius_max"] if self["phantom_radius_max"] is not None else base.radius_range[1],
        )
        try:
            return PhantomSpec(
                size=base.size,
                channels=base.channels,
                tumor_count_range=(self["phantom_tumor_min"], self["phantom_tumor_max"]),
                radius_range=radius,
                contrast_per_channel=base.contrast_per_channel,
                noise_sigma=self["phantom_noise_sigma"],
            )
        except ValueError as exc:
            raise ConfigError("phantom", str(exc)) from None
