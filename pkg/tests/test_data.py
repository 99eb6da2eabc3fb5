import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgdm.data import (
    BadMagicError,
    DegenerateInputError,
    PhantomSpec,
    Sample,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    UnsupportedVersionError,
    generate_phantom,
    load_dataset,
    normalize_intensity,
    read_volume,
    split_dataset,
    write_dataset,
    write_nifti,
    write_volume,
)

# ---------------------------------------------------------------- phantoms


def test_phantom_deterministic():
    spec = PhantomSpec()
    a, b = generate_phantom(spec, 11), generate_phantom(spec, 11)
    assert a.id == b.id
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, generate_phantom(spec, 12).image)


def test_noiseless_phantom_contrast_marks_exactly_the_mask():
    kw = dict(size=32, channels=4, noise_sigma=0.0)
    loud = PhantomSpec(contrast_per_channel=(-5.0, 5.0, 6.0, 7.0), **kw)
    flat = PhantomSpec(contrast_per_channel=(0.0, 0.0, 0.0, 0.0), **kw)
    for seed in range(20):
        s = generate_phantom(loud, seed, normalize=False)
        base = generate_phantom(flat, seed, normalize=False)
        off = s.image != base.image
        for c in range(4):
            np.testing.assert_array_equal(off[c], s.mask.astype(bool))


def test_foreground_fraction_regression_bound():
    spec = PhantomSpec()
    fractions = np.array([generate_phantom(spec, seed).mask.mean() for seed in range(1000)])
    assert fractions.min() > 0.005
    assert fractions.max() < 0.20


def test_generated_samples_satisfy_invariants():
    spec = PhantomSpec()
    for seed in range(200):
        s = generate_phantom(spec, seed)
        assert s.image.shape == (4, 32, 32) and s.image.dtype == np.float32
        assert s.mask.shape == (32, 32) and set(np.unique(s.mask)) <= {0, 1}
        assert np.isfinite(s.image).all()
        Sample(s.id, s.image, s.mask)  # re-validates


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(radius_range=(0.5, 3.0))
    with pytest.raises(ValueError):
        PhantomSpec(radius_range=(2.0, 11.0))
    with pytest.raises(ValueError):
        PhantomSpec(channels=0, contrast_per_channel=())
    with pytest.raises(ValueError):
        PhantomSpec(contrast_per_channel=(1.0,))
    assert PhantomSpec.default_for(64).radius_range == (4.0, 10.0)


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample("x", np.zeros((1, 4, 4), np.float32), np.zeros((4, 5), np.uint8))
    with pytest.raises(ValueError):
        Sample("x", np.zeros((1, 4, 4), np.float32), np.full((4, 4), 2, np.uint8))
    with pytest.raises(ValueError):
        Sample("x", np.full((1, 4, 4), np.nan, np.float32), np.zeros((4, 4), np.uint8))


# ---------------------------------------------------------------- normalization


def test_normalize_example():
    vol = np.array([[1.0, 3.0, 7.0]])
    fg = np.array([[1, 1, 0]])
    np.testing.assert_array_equal(normalize_intensity(vol, fg), [[-1.0, 1.0, 0.0]])


def test_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        normalize_intensity(np.full((3, 3), 2.0), np.ones((3, 3)))
    with pytest.raises(DegenerateInputError):
        normalize_intensity(np.arange(9.0).reshape(3, 3), np.eye(3) * (np.arange(3) == 0))


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_normalize_idempotent_and_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 6))
    fg = rng.random((6, 6)) < 0.6
    fg[0, :2] = True
    once = normalize_intensity(x, fg)
    np.testing.assert_allclose(normalize_intensity(once, fg), once, atol=1e-10)
    np.testing.assert_allclose(normalize_intensity(a * x + b, fg), once, atol=1e-8)
    np.testing.assert_allclose(once[:, fg].mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(once[:, fg].std(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- VGDV


def test_vgdv_hand_built_file(tmp_path):
    values = [1.5, -2.0, 0.25, 3.0]
    raw = b"VGDV" + struct.pack("<5I", 1, 2, 2, 1, 1) + struct.pack("<4f", *values)
    path = tmp_path / "v.vgdv"
    path.write_bytes(raw)
    arr, meta = read_volume(path)
    assert arr.shape == (2, 2, 1) and arr.dtype == np.float32
    np.testing.assert_array_equal(arr.ravel(), values)
    assert meta["format"] == "vgdv"
    write_volume(tmp_path / "w.vgdv", arr)
    assert (tmp_path / "w.vgdv").read_bytes() == raw


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_vgdv_round_trip_bit_identical(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=3))
    arr = (rng.normal(size=shape) * 10 ** rng.uniform(-5, 5)).astype(np.float32)
    path = tmp_path_factory.mktemp("v") / "x.vgdv"
    write_volume(path, arr)
    back, _ = read_volume(path)
    assert back.tobytes() == arr.tobytes() and back.shape == arr.shape


def test_vgdv_errors(tmp_path):
    good = b"VGDV" + struct.pack("<5I", 1, 2, 2, 1, 1) + b"\x00" * 16
    cases = {
        "trunc": (good[:-1], TruncatedPayloadError),
        "short": (good[:10], TruncatedPayloadError),
        "magic": (b"VGDX" + good[4:], BadMagicError),
        "dtype": (good[:20] + struct.pack("<I", 2) + good[24:], UnsupportedDatatypeError),
        "version": (good[:4] + struct.pack("<I", 9) + good[8:], UnsupportedVersionError),
    }
    for name, (raw, error) in cases.items():
        path = tmp_path / name
        path.write_bytes(raw)
        with pytest.raises(error):
            read_volume(path)
    assert len({e for _, e in cases.values()}) == 4


# ---------------------------------------------------------------- NIfTI


def test_nifti_float32_cross_checked_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = np.random.default_rng(0).normal(size=(5, 4, 3)).astype(np.float32)
    path = tmp_path / "a.nii"
    nib.save(nib.Nifti1Image(arr, np.diag([1.5, 2.0, 2.5, 1.0])), str(path))
    ours, meta = read_volume(path)
    np.testing.assert_array_equal(ours, arr.astype(np.float64))
    assert meta["spacing"] == (1.5, 2.0, 2.5)


def test_nifti_int16_scaling_cross_checked_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 5
    path = tmp_path / "b.nii"
    write_nifti(path, arr, datatype=4, scl_slope=0.5, scl_inter=10.0)
    ours, _ = read_volume(path)
    np.testing.assert_array_equal(ours, arr * 0.5 + 10.0)
    np.testing.assert_allclose(ours, nib.load(str(path)).get_fdata(), rtol=0, atol=0)


def test_nifti_big_endian(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = np.random.default_rng(1).normal(size=(3, 3, 2)).astype(">f4")
    img = nib.Nifti1Image(arr, np.eye(4), header=nib.Nifti1Header(endianness=">"))
    path = tmp_path / "be.nii"
    nib.save(img, str(path))
    assert path.read_bytes()[:4] == struct.pack(">i", 348)
    ours, _ = read_volume(path)
    np.testing.assert_array_equal(ours, arr.astype(np.float64))


def test_nifti_errors(tmp_path):
    path = tmp_path / "c.nii"
    write_nifti(path, np.ones((2, 2, 2), np.float32))
    raw = path.read_bytes()
    cases = {
        "hdr": (struct.pack("<i", 349) + raw[4:], BadMagicError),
        "magic": (raw[:344] + b"ni1\x00" + raw[348:], BadMagicError),
        "dtype": (raw[:70] + struct.pack("<h", 64) + raw[72:], UnsupportedDatatypeError),
        "trunc": (raw[:-1], TruncatedPayloadError),
        "header_trunc": (raw[:200], TruncatedPayloadError),
    }
    for name, (data, error) in cases.items():
        p = tmp_path / name
        p.write_bytes(data)
        with pytest.raises(error):
            read_volume(p)


# ---------------------------------------------------------------- splitting and datasets


def test_split_examples():
    items = list(range(10))
    train, val = split_dataset(items, 0.8, seed=3)
    assert len(train) == 8 and len(val) == 2
    assert sorted(train + val) == items and not set(train) & set(val)
    assert split_dataset(items, 0.8, seed=3) == (train, val)
    with pytest.raises(ValueError):
        split_dataset([1], 0.5, 0)
    with pytest.raises(ValueError):
        split_dataset(items, 1.0, 0)


@given(st.integers(2, 50), st.floats(0.01, 0.99), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_split_properties(n, fraction, seed):
    train, val = split_dataset(list(range(n)), fraction, seed)
    assert train and val
    assert sorted(train + val) == list(range(n))


def test_dataset_directory_round_trip(tmp_path):
    spec = PhantomSpec()
    samples = [generate_phantom(spec, s, sample_id=f"p{s}") for s in (4, 2, 9)]
    write_dataset(tmp_path, samples, seeds=[4, 2, 9])
    assert (tmp_path / "p2_img.vgdv").exists() and (tmp_path / "p2_msk.vgdv").exists()
    back = load_dataset(tmp_path)
    assert [s.id for s in back] == ["p4", "p2", "p9"]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
