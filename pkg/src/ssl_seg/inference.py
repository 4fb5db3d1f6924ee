"""Sliding-window whole-volume prediction with Gaussian blending, flip TTA and label-only fusion."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch

from .network import NetworkState, forward
from .volume import LabelVolume, PatchSpec, Volume, normalize_intensity, resample


class CapacityError(MemoryError):
    pass


@dataclass
class InferenceConfig:
    patch_size: tuple = (56, 160, 160)
    overlap: float = 0.5
    sigma_scale: float = 1.0 / 8
    weighting: str = "gaussian"  # | uniform
    tta: str = "none"  # | flips3
    accumulation: str = "full_prob"  # | label_only
    target_spacing: Optional[tuple] = (2.5, 1.5, 1.5)
    resample_back: bool = True
    normalize: bool = True
    clip_lo_pct: float = 0.5
    clip_hi_pct: float = 99.5
    max_prob_voxels: int = 2_000_000_000  # C * voxels budget for full_prob

    def validate(self) -> None:
        if not 0 <= self.overlap <= 0.9:
            raise ValueError(f"overlap must lie in [0, 0.9], got {self.overlap}")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be > 0")
        if self.weighting not in ("gaussian", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.tta not in ("none", "flips3"):
            raise ValueError(f"unknown tta mode {self.tta!r}")
        if self.accumulation not in ("full_prob", "label_only"):
            raise ValueError(f"unknown accumulation {self.accumulation!r}")


Predictor = Callable[[torch.Tensor], torch.Tensor]


def as_predictor(state: Union[NetworkState, Predictor]) -> Predictor:
    """Network states run through ``forward``; any other callable maps (N,1,...) -> (N,C,...) probs."""
    if isinstance(state, NetworkState):
        return lambda x: forward(state, x)
    return state


def tile_positions(vol_shape, patch_size, overlap: float) -> list[PatchSpec]:
    """Lexicographically ordered tiles covering every voxel; the last tile per axis ends at the border."""
    axes = []
    for n, p in zip(vol_shape, patch_size):
        if n <= p:
            axes.append([0])
            continue
        step = max(1, math.ceil(p * (1 - overlap)))
        pos = list(range(0, n - p + 1, step))
        if pos[-1] != n - p:
            pos.append(n - p)
        axes.append(pos)
    return [PatchSpec(o, patch_size) for o in itertools.product(*axes)]


def gaussian_weights(patch_size, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    if not sigma_scale > 0:
        raise ValueError("sigma_scale must be > 0")
    w = np.ones((), dtype=np.float64)
    for n in patch_size:
        x = np.arange(n) - (n - 1) / 2.0
        g = np.exp(-0.5 * (x / (sigma_scale * n)) ** 2)
        w = np.multiply.outer(w, g)
    w = w / w.max()
    return np.maximum(w, 1e-6).astype(np.float32)


FLIP_AXES = ((), (2,), (3,), (4,))  # identity and one flip per spatial axis of (N, 1, D, W, H)


def tta_predict(state, patch, mode: str = "flips3") -> torch.Tensor:
    """Average of identity and the three single-axis flips, each un-flipped, renormalised."""
    predict = as_predictor(state)
    patch = torch.as_tensor(patch)
    if patch.ndim == 3:
        patch = patch[None, None]
    if mode == "none":
        return predict(patch)
    if mode != "flips3":
        raise ValueError(f"unknown tta mode {mode!r}")
    acc = None
    for axes in FLIP_AXES:
        x = torch.flip(patch, axes) if axes else patch
        p = predict(x)
        p = torch.flip(p, axes) if axes else p
        acc = p if acc is None else acc + p
    acc = acc / len(FLIP_AXES)
    return acc / acc.sum(dim=1, keepdim=True)


class AllocationLog:
    """Records whole-volume fusion buffers: (name, nbytes) per allocation."""

    def __init__(self):
        self.records: list[tuple[str, int]] = []

    def __call__(self, name: str, array: np.ndarray) -> np.ndarray:
        self.records.append((name, int(array.nbytes)))
        return array

    @property
    def total_bytes(self) -> int:
        return sum(n for _, n in self.records)


def _pad_to(data: np.ndarray, patch_size) -> tuple[np.ndarray, tuple]:
    pads = [(0, max(0, p - n)) for n, p in zip(data.shape, patch_size)]
    if any(b for _, b in pads):
        # pad after normalisation with 0, the post-normalisation mean
        data = np.pad(data, pads, mode="constant", constant_values=0.0)
    return data, data.shape


def predict_labels_array(state, data: np.ndarray, num_classes: int, cfg: InferenceConfig,
                         allocate: Optional[AllocationLog] = None) -> np.ndarray:
    """Tile, predict and fuse an already preprocessed 3D array; returns uint8 labels."""
    cfg.validate()
    allocate = allocate or (lambda name, a: a)
    orig_shape = data.shape
    data, shape = _pad_to(np.asarray(data, dtype=np.float32), cfg.patch_size)
    tiles = tile_positions(shape, cfg.patch_size, cfg.overlap)
    if cfg.weighting == "gaussian":
        weight = gaussian_weights(cfg.patch_size, cfg.sigma_scale)
    else:
        weight = np.ones(cfg.patch_size, dtype=np.float32)

    if cfg.accumulation == "full_prob":
        if num_classes * int(np.prod(shape)) > cfg.max_prob_voxels:
            raise CapacityError(
                f"full_prob fusion needs {num_classes} x {int(np.prod(shape))} voxels, "
                f"budget is {cfg.max_prob_voxels}; use accumulation=label_only"
            )
        acc = allocate("class_prob_sum", np.zeros((num_classes, *shape), dtype=np.float32))
        wsum = allocate("weight_sum", np.zeros(shape, dtype=np.float32))
    else:
        labels = allocate("labels", np.zeros(shape, dtype=np.uint8))
        best = allocate("best_weight", np.zeros(shape, dtype=np.float32))

    for tile in tiles:
        sl = tile.slices()
        x = torch.from_numpy(np.ascontiguousarray(data[sl]))[None, None]
        probs = tta_predict(state, x, cfg.tta)[0].numpy()
        if cfg.accumulation == "full_prob":
            acc[(slice(None), *sl)] += probs * weight
            wsum[sl] += weight
        else:
            tile_labels = np.argmax(probs, axis=0).astype(np.uint8)
            region = best[sl]
            win = weight > region  # strict: ties keep the earlier tile
            region[win] = weight[win]
            labels[sl][win] = tile_labels[win]

    if cfg.accumulation == "full_prob":
        out = np.argmax(acc / wsum, axis=0).astype(np.uint8)
    else:
        out = labels
    return out[tuple(slice(0, n) for n in orig_shape)]


def predict_volume(state, vol: Volume, cfg: InferenceConfig, num_classes: Optional[int] = None,
                   allocate: Optional[AllocationLog] = None) -> LabelVolume:
    """Resample, normalise, sliding-window predict and map labels back to the native grid."""
    if num_classes is None:
        if not isinstance(state, NetworkState):
            raise ValueError("num_classes is required for predictor callables")
        num_classes = state.spec.num_classes
    work = vol
    if cfg.target_spacing is not None:
        work = resample(work, cfg.target_spacing, "linear")
    if cfg.normalize:
        work = normalize_intensity(work, cfg.clip_lo_pct, cfg.clip_hi_pct)
    labels = predict_labels_array(state, work.voxels, num_classes, cfg, allocate)
    if cfg.resample_back and work.spacing != vol.spacing:
        labels = _to_native_grid(labels, work.spacing, vol.spacing, vol.shape)
        return LabelVolume(labels, vol.spacing, num_classes)
    return LabelVolume(labels, work.spacing, num_classes)


def _to_native_grid(labels: np.ndarray, spacing, native_spacing, native_shape) -> np.ndarray:
    # nearest lookup of each native voxel centre; exact native shape by construction
    idx = []
    for n_native, n_work, s_work, s_native in zip(native_shape, labels.shape, spacing, native_spacing):
        centre = (np.arange(n_native) + 0.5) * s_native / s_work - 0.5
        idx.append(np.clip(np.floor(centre + 0.5).astype(np.int64), 0, n_work - 1))
    return labels[np.ix_(*idx)]
