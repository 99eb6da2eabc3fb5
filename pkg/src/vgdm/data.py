"""Synthetic phantoms, intensity normalization, volume file formats and dataset layout.

Two on-disk formats are read:

* VGDV, the package's own raw container: ``b"VGDV"``, u32 version, u32 x 3 dims,
  u32 dtype code, then little-endian float32 pixels in C (raster) order.
* Single-file NIfTI-1 (``.nii``), float32 or int16 only, with slope/intercept scaling.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VGDV_MAGIC = b"VGDV"
VGDV_VERSION = 1
VGDV_FLOAT32 = 1
_VGDV_HEADER = struct.Struct("<4sIIIII")

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
NIFTI_INT16 = 4
NIFTI_FLOAT32 = 16
_NIFTI_DTYPES = {NIFTI_INT16: ("i2", 16), NIFTI_FLOAT32: ("f4", 32)}

MANIFEST = "manifest.csv"


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DegenerateInputError(ValueError):
    """Normalization foreground has fewer than two pixels or zero variance."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (C, H, W) float32
    mask: np.ndarray  # (H, W) uint8

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree spatially")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    channels: int = 4
    tumor_count_range: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (2.0, 5.0)
    # T1 hypo-intense, T1ce/T2/FLAIR hyper-intense
    contrast_per_channel: tuple[float, ...] = field(default=(-0.8, 1.5, 1.2, 2.0))
    noise_sigma: float = 0.1

    def __post_init__(self) -> None:
        if self.size < 8:
            raise ValueError(f"phantom size must be at least 8, got {self.size}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if len(self.contrast_per_channel) != self.channels:
            raise ValueError(f"{len(self.contrast_per_channel)} contrasts given for {self.channels} channels")
        lo, hi = self.tumor_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid tumor_count_range {self.tumor_count_range}")
        rlo, rhi = self.radius_range
        if not 1.0 < rlo <= rhi < self.size / 3:
            raise ValueError(f"radius_range {self.radius_range} must lie within (1, {self.size / 3:.3f})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @classmethod
    def default_for(cls, size: int, channels: int = 4) -> PhantomSpec:
        """Default spec with tumor radii scaled to the image side."""
        scale = size / 32
        contrast = PhantomSpec.contrast_per_channel
        if channels != 4:
            contrast = tuple(1.5 if i % 2 else -0.8 for i in range(channels))
        lo = max(2.0 * scale, 1.2)
        hi = min(max(5.0 * scale, lo), 0.99 * size / 3)
        return cls(size=size, channels=channels, radius_range=(lo, hi), contrast_per_channel=contrast)


def _phantom_layers(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (brain, tumor mask, background image, noise) for one phantom."""
    rng = np.random.default_rng(seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    center = s / 2 + rng.uniform(-0.05 * s, 0.05 * s, size=2)
    brain_r = 0.42 * s
    brain = (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= brain_r**2

    background = np.zeros((spec.channels, s, s))
    for c in range(spec.channels):
        theta = rng.uniform(0, 2 * np.pi)
        level = rng.uniform(0.8, 1.2)
        slope = rng.uniform(0.1, 0.4)
        ramp = ((xx - center[1]) * np.cos(theta) + (yy - center[0]) * np.sin(theta)) / s
        background[c] = np.where(brain, level + slope * ramp, 0.0)

    mask = np.zeros((s, s), dtype=bool)
    count = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    for _ in range(count):
        a, b = rng.uniform(*spec.radius_range, size=2)
        phi = rng.uniform(0, np.pi)
        reach = brain_r - max(a, b) - 1.0
        rho = reach * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        cy, cx = center[0] + rho * np.sin(ang), center[1] + rho * np.cos(ang)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    mask &= brain

    noise = rng.standard_normal((spec.channels, s, s))
    return brain, mask, background, noise


def generate_phantom(spec: PhantomSpec, seed: int, sample_id: str | None = None, normalize: bool = True) -> Sample:
    """Disc-shaped "brain" with per-channel intensity ramps and elliptical "tumors".

    With ``normalize`` each channel is z-scored over the brain disc and the
    outside is zero.
    """
    brain, mask, background, noise = _phantom_layers(spec, seed)
    contrast = np.asarray(spec.contrast_per_channel, dtype=np.float64)[:, None, None]
    image = background + contrast * mask + spec.noise_sigma * noise * brain
    if normalize:
        image = normalize_intensity(image, brain)
    return Sample(
        id=sample_id if sample_id is not None else f"phantom_{seed}",
        image=image.astype(np.float32),
        mask=mask.astype(np.uint8),
    )


def normalize_intensity(volume: np.ndarray, foreground_mask: np.ndarray) -> np.ndarray:
    """Z-score each channel over the foreground (population sd); background set to 0.

    ``volume`` is ``[H, W]`` / ``[D, H, W]`` matching the mask, or ``[C, ...]``
    with the mask broadcast over the leading channel axis.
    """
    volume = np.asarray(volume, dtype=np.float64)
    fg = np.asarray(foreground_mask).astype(bool)
    if volume.shape == fg.shape:
        return _zscore(volume, fg)
    if volume.shape[1:] != fg.shape:
        raise ValueError(f"volume {volume.shape} incompatible with mask {fg.shape}")
    return np.stack([_zscore(channel, fg) for channel in volume])


def _zscore(x: np.ndarray, fg: np.ndarray) -> np.ndarray:
    values = x[fg]
    if values.size < 2:
        raise DegenerateInputError(f"foreground has {values.size} pixel(s); need at least 2")
    sd = values.std()
    if not sd > 0:
        raise DegenerateInputError("foreground intensities have zero variance")
    return np.where(fg, (x - values.mean()) / sd, 0.0)


def write_volume(path: str | Path, array: np.ndarray) -> None:
    """Write a VGDV file. Arrays of rank < 3 are padded with leading unit dims."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 3:
        raise ValueError(f"VGDV holds at most 3 dims, got {arr.ndim}")
    dims = (1,) * (3 - arr.ndim) + arr.shape
    header = _VGDV_HEADER.pack(VGDV_MAGIC, VGDV_VERSION, *dims, VGDV_FLOAT32)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_volume(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a VGDV or NIfTI-1 file, returning ``(array, metadata)``.

    VGDV arrays come back as float32 with shape ``dims``; NIfTI arrays as
    float64 indexed ``[x, y, z]`` with ``metadata["spacing"]`` from ``pixdim``.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == VGDV_MAGIC:
        return _read_vgdv(raw)
    return _read_nifti(raw)


def _read_vgdv(raw: bytes) -> tuple[np.ndarray, dict]:
    if len(raw) < _VGDV_HEADER.size:
        raise TruncatedPayloadError(f"VGDV header needs {_VGDV_HEADER.size} bytes, file has {len(raw)}")
    _, version, d0, d1, d2, code = _VGDV_HEADER.unpack_from(raw)
    if version != VGDV_VERSION:
        raise UnsupportedVersionError(f"VGDV version {version} not supported")
    if code != VGDV_FLOAT32:
        raise UnsupportedDatatypeError(f"VGDV dtype code {code} not supported")
    n = d0 * d1 * d2
    payload = raw[_VGDV_HEADER.size :]
    if len(payload) < 4 * n:
        raise TruncatedPayloadError(f"VGDV payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4", count=n).astype(np.float32).reshape(d0, d1, d2)
    return data, {"format": "vgdv", "version": version, "dims": (d0, d1, d2), "spacing": (1.0, 1.0, 1.0)}


def _read_nifti(raw: bytes) -> tuple[np.ndarray, dict]:
    if len(raw) < 4:
        raise BadMagicError("file too short to carry a header")
    if struct.unpack_from("<i", raw)[0] == NIFTI_HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", raw)[0] == NIFTI_HEADER_SIZE:
        endian = ">"
    else:
        raise BadMagicError("neither VGDV magic nor NIfTI-1 header size 348")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError(f"NIfTI header truncated at {len(raw)} bytes")
    if raw[344:348] != NIFTI_MAGIC:
        raise BadMagicError(f"NIfTI magic {raw[344:348]!r} is not single-file 'n+1'")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype {datatype} not supported (float32/int16 only)")
    ndim = dim[0]
    if not 1 <= ndim <= 7 or any(d > 1 for d in dim[4 : ndim + 1]):
        raise VolumeFormatError(f"only volumes of up to 3 dimensions are supported, dim={dim}")
    shape = tuple(max(int(d), 1) for d in dim[1:4])
    code, _ = _NIFTI_DTYPES[datatype]
    dtype = np.dtype(endian + code)
    n = int(np.prod(shape))
    offset = int(vox_offset)
    if offset < NIFTI_HEADER_SIZE:
        offset = NIFTI_HEADER_SIZE
    if len(raw) < offset + n * dtype.itemsize:
        raise TruncatedPayloadError(f"NIfTI payload truncated: need {offset + n * dtype.itemsize} bytes, have {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape, order="F").astype(np.float64)
    if scl_slope != 0.0:
        data = data * scl_slope + scl_inter
    meta = {
        "format": "nifti1",
        "dims": shape,
        "datatype": datatype,
        "spacing": tuple(float(p) for p in pixdim[1:4]),
    }
    return data, meta


def write_nifti(
    path: str | Path,
    array: np.ndarray,
    datatype: int = NIFTI_FLOAT32,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
) -> None:
    """Write a minimal little-endian single-file NIfTI-1 volume (``[x, y, z]`` indexing)."""
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype {datatype} not supported")
    arr = np.asarray(array)
    if arr.ndim > 3:
        raise ValueError("at most 3 dimensions")
    shape = arr.shape + (1,) * (3 - arr.ndim)
    code, bitpix = _NIFTI_DTYPES[datatype]
    header = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, arr.ndim if arr.ndim else 1, *shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, datatype, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", header, 108, 352.0, scl_slope, scl_inter)
    header[344:348] = NIFTI_MAGIC
    payload = arr.reshape(shape).astype("<" + code).tobytes(order="F")
    Path(path).write_bytes(bytes(header) + b"\x00" * 4 + payload)


def split_dataset(samples: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle into disjoint, exhaustive (train, val) lists."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = min(max(int(round(train_fraction * len(samples))), 1), len(samples) - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def write_dataset(root: str | Path, samples: Sequence[Sample], seeds: Sequence[int] | None = None) -> Path:
    """Write ``<id>_img.vgdv`` / ``<id>_msk.vgdv`` pairs plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        write_volume(root / f"{sample.id}_img.vgdv", sample.image)
        write_volume(root / f"{sample.id}_msk.vgdv", sample.mask)
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "seed"])
        for i, sample in enumerate(samples):
            writer.writerow([sample.id, "" if seeds is None else seeds[i]])
    return root


def load_dataset(root: str | Path) -> list[Sample]:
    """Load every image/mask pair under ``root``, in manifest order when one exists."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    if (root / MANIFEST).exists():
        with open(root / MANIFEST, newline="") as fh:
            ids = [row["id"] for row in csv.DictReader(fh)]
    else:
        ids = sorted(p.name[: -len("_img.vgdv")] for p in root.glob("*_img.vgdv"))
    samples = []
    for sample_id in ids:
        image, _ = read_volume(root / f"{sample_id}_img.vgdv")
        mask, _ = read_volume(root / f"{sample_id}_msk.vgdv")
        samples.append(Sample(sample_id, image, mask.reshape(mask.shape[-2:]).astype(np.uint8)))
    if not samples:
        raise ValueError(f"no samples found under {root}")
    return samples
