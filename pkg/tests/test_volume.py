import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ssl_seg.volume import (
    LabelVolume,
    PatchSpec,
    Volume,
    VolumeCorruptionError,
    VolumeFormatError,
    extract_patch,
    insert_patch,
    load_volume,
    normalize_intensity,
    resample,
    resampled_shape,
    save_volume,
    volume_paths,
)


def rand_volume(rng, shape=(6, 7, 8), spacing=(2.0, 1.0, 1.5)):
    return Volume(rng.normal(size=shape).astype(np.float32), spacing)


# ------------------------------------------------------------ resampling


def test_resample_shape_example():
    vol = Volume(np.zeros((10, 10, 10)), (5, 3, 3))
    out = resample(vol, (2.5, 1.5, 1.5))
    assert out.shape == (20, 20, 20)
    assert out.spacing == (2.5, 1.5, 1.5)


def test_resampled_shape_minimum_one():
    assert resampled_shape((1, 2, 3), (1, 1, 1), (10, 10, 10)) == (1, 1, 1)


def test_resample_identity_is_bitwise():
    rng = np.random.default_rng(0)
    vol = rand_volume(rng)
    for mode in ("linear", "nearest"):
        out = resample(vol, vol.spacing, mode)
        assert out.voxels.tobytes() == vol.voxels.tobytes()
        assert out.voxels is not vol.voxels


@pytest.mark.parametrize("target", [(0.7, 1.3, 2.9), (4.0, 0.5, 1.0)])
def test_resample_constant_stays_constant(target):
    vol = Volume(np.full((5, 6, 7), 3.25), (2.0, 1.0, 1.5))
    for mode in ("linear", "nearest"):
        assert np.all(resample(vol, target, mode).voxels == np.float32(3.25))


def test_resample_linear_matches_map_coordinates():
    rng = np.random.default_rng(1)
    vol = rand_volume(rng, (7, 9, 5), (2.0, 1.0, 1.5))
    target = (1.3, 0.8, 2.1)
    out = resample(vol, target, "linear")
    grids = [(np.arange(n) + 0.5) * t / s - 0.5 for n, s, t in zip(out.shape, vol.spacing, target)]
    coords = np.meshgrid(*grids, indexing="ij")
    ref = ndimage.map_coordinates(vol.voxels.astype(np.float64), coords, order=1, mode="nearest")
    np.testing.assert_allclose(out.voxels, ref, atol=1e-5)


def test_resample_linear_exact_on_affine_field_interior():
    z, y, x = np.meshgrid(np.arange(12), np.arange(12), np.arange(12), indexing="ij")
    vol = Volume(1.0 + 2.0 * z - 0.5 * y + 0.25 * x, (1.0, 1.0, 1.0))
    out = resample(vol, (0.5, 0.5, 0.5), "linear")
    zz, yy, xx = np.meshgrid(*[(np.arange(24) + 0.5) * 0.5 - 0.5] * 3, indexing="ij")
    ref = 1.0 + 2.0 * zz - 0.5 * yy + 0.25 * xx
    inner = (slice(1, -1),) * 3
    np.testing.assert_allclose(out.voxels[inner], ref[inner], atol=1e-4)


def test_resample_nearest_labels_subset_and_required():
    rng = np.random.default_rng(2)
    lab = LabelVolume(rng.choice([0, 2, 5], size=(6, 6, 6)), (2.0, 2.0, 2.0), 6)
    out = resample(lab, (0.7, 1.1, 3.0), "nearest")
    assert isinstance(out, LabelVolume)
    assert set(np.unique(out.voxels)) <= {0, 2, 5}
    with pytest.raises(ValueError):
        resample(lab, (1.0, 1.0, 1.0), "linear")


def test_resample_rejects_bad_spacing():
    vol = Volume(np.zeros((2, 2, 2)))
    for bad in [(0, 1, 1), (1, -1, 1)]:
        with pytest.raises(ValueError):
            resample(vol, bad)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(0.5, 3.0)] * 3), st.integers(0, 10_000))
def test_resample_idempotent_at_fixed_spacing(target, seed):
    vol = rand_volume(np.random.default_rng(seed), (5, 4, 6), (1.0, 2.0, 1.5))
    once = resample(vol, target)
    twice = resample(once, target)
    assert twice.shape == once.shape
    np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-6)


# ------------------------------------------------------------ normalisation


def test_normalize_constant_gives_zeros():
    out = normalize_intensity(Volume(np.full((4, 4, 4), 7.0)))
    assert np.all(out.voxels == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_normalize_zero_mean_unit_std(seed, scale):
    rng = np.random.default_rng(seed)
    out = normalize_intensity(Volume(rng.normal(3.0, scale, size=(8, 8, 8))))
    assert abs(float(out.voxels.astype(np.float64).mean())) < 1e-5
    assert abs(float(out.voxels.astype(np.float64).std()) - 1) < 1e-5


def test_normalize_clips_extremes_at_percentiles():
    rng = np.random.default_rng(3)
    data = rng.choice([-1000.0, 0.0, 1000.0], size=(10, 10, 10), p=[0.004, 0.992, 0.004])
    data += rng.normal(0, 1, size=data.shape)
    out = normalize_intensity(Volume(data), 0.5, 99.5)
    flat = np.sort(data.astype(np.float32).astype(np.float64).ravel())

    def pct(q):  # linear-interpolated percentile by explicit sorting
        pos = q / 100 * (flat.size - 1)
        lo = int(np.floor(pos))
        return flat[lo] + (flat[min(lo + 1, flat.size - 1)] - flat[lo]) * (pos - lo)

    lo, hi = pct(0.5), pct(99.5)
    clipped = np.clip(flat, lo, hi)
    expected_max = (hi - clipped.mean()) / clipped.std()
    expected_min = (lo - clipped.mean()) / clipped.std()
    assert out.voxels.max() == pytest.approx(expected_max, rel=1e-5)
    assert out.voxels.min() == pytest.approx(expected_min, rel=1e-5)


def test_normalize_rejects_bad_percentiles():
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.zeros((2, 2, 2))), 50, 10)


# ------------------------------------------------------------ patches


def test_extract_interior_patch():
    rng = np.random.default_rng(4)
    vol = rand_volume(rng, (10, 10, 10))
    p = extract_patch(vol, PatchSpec((2, 3, 4), (3, 4, 5)))
    assert np.array_equal(p.voxels, vol.voxels[2:5, 3:7, 4:9])
    assert p.spacing == vol.spacing


def test_extract_negative_origin_pads():
    vol = Volume(np.ones((4, 4, 4)))
    p = extract_patch(vol, PatchSpec((-2, 0, 0), (4, 4, 4)), pad_value=-5)
    assert np.all(p.voxels[:2] == -5)
    assert np.all(p.voxels[2:] == 1)


def test_extract_full_volume_identity_and_outside():
    rng = np.random.default_rng(5)
    vol = rand_volume(rng)
    assert np.array_equal(extract_patch(vol, PatchSpec((0, 0, 0), vol.shape)).voxels, vol.voxels)
    far = extract_patch(vol, PatchSpec((100, 0, 0), (2, 2, 2)), pad_value=9)
    assert np.all(far.voxels == 9)


def test_extract_label_patch_keeps_type():
    lab = LabelVolume(np.ones((4, 4, 4)), num_classes=3)
    p = extract_patch(lab, PatchSpec((1, 1, 1), (5, 5, 5)))
    assert isinstance(p, LabelVolume) and p.voxels.dtype == np.uint8
    assert p.voxels[-1, -1, -1] == 0


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(-6, 10)] * 3), st.tuples(*[st.integers(1, 8)] * 3))
def test_extract_then_insert_is_identity(origin, size):
    vol = rand_volume(np.random.default_rng(0), (7, 8, 9))
    spec = PatchSpec(origin, size)
    back = insert_patch(vol, extract_patch(vol, spec, pad_value=123.0), spec)
    assert np.array_equal(back.voxels, vol.voxels)


def test_patch_spec_validation():
    with pytest.raises(ValueError):
        PatchSpec((0, 0, 0), (0, 1, 1))


# ------------------------------------------------------------ file format


def test_roundtrip_random_volumes(tmp_path):
    rng = np.random.default_rng(6)
    for trial in range(50):
        shape = tuple(int(n) for n in rng.integers(1, 9, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.1, 5, size=3))
        vol = Volume(rng.normal(size=shape) * 1e3, spacing)
        save_volume(vol, tmp_path / f"v{trial}")
        back = load_volume(tmp_path / f"v{trial}")
        assert back.shape == vol.shape and back.spacing == vol.spacing
        assert back.voxels.tobytes() == vol.voxels.tobytes()


def test_label_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    lab = LabelVolume(rng.integers(0, 14, size=(3, 4, 5)), (1.0, 0.5, 2.0), 14)
    save_volume(lab, tmp_path / "lab.raw")
    back = load_volume(tmp_path / "lab.json")
    assert isinstance(back, LabelVolume) and back.num_classes == 14
    assert np.array_equal(back.voxels, lab.voxels)


def test_file_layout_and_header(tmp_path):
    save_volume(Volume(np.arange(8).reshape(2, 2, 2)), tmp_path / "a")
    raw, js = volume_paths(tmp_path / "a")
    header = json.loads(js.read_text())
    assert header == {"dtype": "f32", "shape": [2, 2, 2], "spacing": [1.0, 1.0, 1.0]}
    assert np.array_equal(np.frombuffer(raw.read_bytes(), "<f4"), np.arange(8))


def test_payload_size_mismatch_is_corruption(tmp_path):
    save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "c")
    raw, _ = volume_paths(tmp_path / "c")
    raw.write_bytes(np.zeros(7, "<f4").tobytes())
    with pytest.raises(VolumeCorruptionError):
        load_volume(tmp_path / "c")


@pytest.mark.parametrize("field_name,value", [
    ("shape", [2, 2]), ("shape", [2, 0, 2]), ("spacing", [1, -1, 1]),
    ("dtype", "f64"), ("num_classes", 1),
])
def test_malformed_header_names_field(tmp_path, field_name, value):
    save_volume(LabelVolume(np.zeros((2, 2, 2)), num_classes=3), tmp_path / "h")
    _, js = volume_paths(tmp_path / "h")
    header = json.loads(js.read_text())
    header[field_name] = value
    js.write_text(json.dumps(header))
    with pytest.raises(VolumeFormatError) as info:
        load_volume(tmp_path / "h")
    assert info.value.field == field_name


def test_non_json_header(tmp_path):
    save_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "j")
    volume_paths(tmp_path / "j")[1].write_text("shape = 1")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "j")


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 3), num_classes=3)
