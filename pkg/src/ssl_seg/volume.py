"""Volumetric data model, raw+json file format and nnU-Net style preprocessing."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class VolumeFormatError(ValueError):
    """Header is malformed; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class VolumeCorruptionError(ValueError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass
class Volume:
    """Dense 3D float32 scalar field with per-axis spacing in mm (D, W, H order)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {self.voxels.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class LabelVolume:
    """Integer class field; 0 is background, ids lie in [0, num_classes - 1]."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 2

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {arr.shape}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(f"class ids must lie in [0, {self.num_classes - 1}]")
        self.voxels = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


AnyVolume = Union[Volume, LabelVolume]


@dataclass(frozen=True)
class PatchSpec:
    """Box with integer origin (may be negative or overhang) and positive size."""

    origin: tuple
    size: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise ValueError("origin and size must have three entries")
        if min(self.size) < 1:
            raise ValueError(f"patch size entries must be >= 1, got {self.size}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


def _replace_voxels(vol: AnyVolume, voxels: np.ndarray, spacing=None) -> AnyVolume:
    spacing = vol.spacing if spacing is None else spacing
    if isinstance(vol, LabelVolume):
        return LabelVolume(voxels, spacing, vol.num_classes)
    return Volume(voxels, spacing)


# ---------------------------------------------------------------- resampling


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _source_coords(n_out: int, src_spacing: float, dst_spacing: float) -> np.ndarray:
    # half-voxel centred: output centre (i + 0.5) * dst maps to source index (i + 0.5) * dst / src - 0.5
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (dst_spacing / src_spacing) - 0.5


def resample(vol: AnyVolume, target_spacing: Sequence[float], mode: str = "linear") -> AnyVolume:
    """Resample onto a grid with ``target_spacing``.

    Output extent is ``round(shape * spacing / target_spacing)`` per axis.
    ``linear`` is separable trilinear interpolation with edge clamping,
    ``nearest`` copies the source voxel containing each output centre and is
    mandatory for label volumes.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ValueError(f"target spacing must be three positive reals, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if isinstance(vol, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    if target == vol.spacing:
        return _replace_voxels(vol, vol.voxels.copy())

    out_shape = resampled_shape(vol.shape, vol.spacing, target)
    data = vol.voxels
    if mode == "nearest":
        idx = []
        for n_in, n_out, s, t in zip(vol.shape, out_shape, vol.spacing, target):
            src = np.floor(_source_coords(n_out, s, t) + 0.5).astype(np.int64)
            idx.append(np.clip(src, 0, n_in - 1))
        out = data[np.ix_(*idx)]
    else:
        out = data.astype(np.float64)
        for axis, (n_in, n_out, s, t) in enumerate(zip(vol.shape, out_shape, vol.spacing, target)):
            c = np.clip(_source_coords(n_out, s, t), 0.0, n_in - 1)
            lo = np.floor(c).astype(np.int64)
            hi = np.minimum(lo + 1, n_in - 1)
            w = c - lo
            bshape = [1, 1, 1]
            bshape[axis] = n_out
            w = w.reshape(bshape)
            out = np.take(out, lo, axis=axis) * (1.0 - w) + np.take(out, hi, axis=axis) * w
    return _replace_voxels(vol, out, target)


# ------------------------------------------------------------- normalization


def normalize_intensity(vol: Volume, clip_lo_pct: float = 0.5, clip_hi_pct: float = 99.5) -> Volume:
    """Clip to whole-volume percentiles, then z-score over the clipped values."""
    if not 0 <= clip_lo_pct < clip_hi_pct <= 100:
        raise ValueError(f"need 0 <= lo < hi <= 100, got ({clip_lo_pct}, {clip_hi_pct})")
    data = vol.voxels.astype(np.float64)
    lo, hi = np.percentile(data, [clip_lo_pct, clip_hi_pct])
    clipped = np.clip(data, lo, hi)
    std = clipped.std()
    if std == 0:
        return Volume(np.zeros_like(data), vol.spacing)
    return Volume((clipped - clipped.mean()) / std, vol.spacing)


# ---------------------------------------------------------------- patches


def _overlap(spec: PatchSpec, shape):
    src, dst = [], []
    for o, s, n in zip(spec.origin, spec.size, shape):
        a, b = max(o, 0), min(o + s, n)
        if b <= a:
            return None
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    return tuple(src), tuple(dst)


def extract_patch(vol: AnyVolume, spec: PatchSpec, pad_value: float = 0.0) -> AnyVolume:
    """Copy ``spec``'s region out of ``vol``; out-of-bounds voxels get ``pad_value``."""
    out = np.full(spec.size, pad_value, dtype=vol.voxels.dtype)
    region = _overlap(spec, vol.shape)
    if region is not None:
        src, dst = region
        out[dst] = vol.voxels[src]
    return _replace_voxels(vol, out)


def insert_patch(vol: AnyVolume, patch: AnyVolume, spec: PatchSpec) -> AnyVolume:
    """Write the in-bounds part of ``patch`` back into a copy of ``vol``."""
    if tuple(patch.shape) != spec.size:
        raise ValueError(f"patch shape {patch.shape} does not match spec size {spec.size}")
    out = vol.voxels.copy()
    region = _overlap(spec, vol.shape)
    if region is not None:
        src, dst = region
        out[src] = patch.voxels[dst]
    return _replace_voxels(vol, out)


# ---------------------------------------------------------------- file I/O


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _base_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path


def volume_paths(path) -> tuple[Path, Path]:
    base = _base_path(path)
    return base.with_name(base.name + ".raw"), base.with_name(base.name + ".json")


def save_volume(vol: AnyVolume, path) -> Path:
    """Write ``<name>.raw`` (little-endian, C-order) and the ``<name>.json`` header."""
    raw_path, json_path = volume_paths(path)
    header = {"shape": list(vol.shape), "spacing": list(vol.spacing)}
    if isinstance(vol, LabelVolume):
        header["dtype"] = "u8"
        header["num_classes"] = int(vol.num_classes)
        payload = vol.voxels.astype("<u1").tobytes(order="C")
    else:
        header["dtype"] = "f32"
        payload = vol.voxels.astype("<f4").tobytes(order="C")
    atomic_write_bytes(raw_path, payload)
    atomic_write_text(json_path, json.dumps(header, sort_keys=True) + "\n")
    return raw_path


def _parse_header(text: str) -> dict:
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError("header", f"not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise VolumeFormatError("header", "expected a key-value object")

    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in shape)
    ):
        raise VolumeFormatError("shape", f"expected three positive integers, got {shape!r}")
    spacing = header.get("spacing")
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) and not isinstance(s, bool) and s > 0 for s in spacing)
    ):
        raise VolumeFormatError("spacing", f"expected three positive reals, got {spacing!r}")
    dtype = header.get("dtype")
    if dtype not in ("f32", "u8"):
        raise VolumeFormatError("dtype", f"expected 'f32' or 'u8', got {dtype!r}")
    if dtype == "u8":
        nc = header.get("num_classes")
        if not isinstance(nc, int) or isinstance(nc, bool) or not 2 <= nc <= 256:
            raise VolumeFormatError("num_classes", f"expected an integer in [2, 256], got {nc!r}")
    return header


def load_volume(path) -> AnyVolume:
    raw_path, json_path = volume_paths(path)
    header = _parse_header(json_path.read_text(encoding="utf-8"))
    shape = tuple(header["shape"])
    dtype = np.dtype("<f4") if header["dtype"] == "f32" else np.dtype("<u1")
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeCorruptionError(
            f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    voxels = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if header["dtype"] == "u8":
        nc = header["num_classes"]
        if voxels.max(initial=0) >= nc:
            raise VolumeCorruptionError(f"{raw_path}: class id >= num_classes={nc}")
        return LabelVolume(voxels, tuple(header["spacing"]), nc)
    return Volume(voxels, tuple(header["spacing"]))
