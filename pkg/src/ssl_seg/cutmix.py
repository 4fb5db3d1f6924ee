"""CutMix box masks, image/pseudo-label mixing, pseudo-labels and balanced cropping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .network import NetworkState, ShapeError, forward
from .volume import PatchSpec


class DegenerateShapeError(ValueError):
    pass


@dataclass
class CutMixMask:
    """Binary field that is 1 inside a single axis-aligned box."""

    mask: np.ndarray
    box: PatchSpec

    @property
    def shape(self):
        return self.mask.shape

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def from_box(cls, shape, box: PatchSpec) -> "CutMixMask":
        mask = np.zeros(shape, dtype=np.uint8)
        mask[box.slices()] = 1
        return cls(mask, box)

    @classmethod
    def full(cls, shape) -> "CutMixMask":
        # test-only identity path: the box is the whole volume
        return cls.from_box(shape, PatchSpec((0, 0, 0), shape))


def make_cutmix_mask(shape: Sequence[int], ratio_range=(0.25, 0.75), rng: Optional[np.random.Generator] = None) -> CutMixMask:
    """Sample a box whose volume fraction is drawn uniformly from ``ratio_range``.

    Sides are ``round(fraction ** (1/3) * dim)`` clamped to ``[1, dim]``, and the
    box is placed uniformly at random fully inside the volume.
    """
    r_min, r_max = ratio_range
    if not 0 < r_min <= r_max < 1:
        raise ValueError(f"need 0 < r_min <= r_max < 1, got {ratio_range}")
    rng = np.random.default_rng() if rng is None else rng
    shape = tuple(int(n) for n in shape)
    frac = rng.uniform(r_min, r_max)
    side = [min(max(int(round(frac ** (1 / 3) * n)), 1), n) for n in shape]
    if side == list(shape):
        raise DegenerateShapeError(
            f"shape {shape} too small: a box of fraction {frac:.3f} covers the whole volume"
        )
    origin = [int(rng.integers(0, n - s + 1)) for n, s in zip(shape, side)]
    return CutMixMask.from_box(shape, PatchSpec(origin, side))


def mix(a, b, m):
    """Voxelwise select: ``a`` where the mask is 1, ``b`` elsewhere.

    Works for numpy arrays and torch tensors; leading (batch/channel) axes of
    ``a`` and ``b`` broadcast against the 3D mask.
    """
    mask = m.mask if isinstance(m, CutMixMask) else m
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"cannot mix fields of shape {tuple(a.shape)} and {tuple(b.shape)}")
    if tuple(a.shape[-3:]) != tuple(mask.shape[-3:]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match field {tuple(a.shape)}")
    if isinstance(a, torch.Tensor):
        sel = torch.as_tensor(np.asarray(mask), device=a.device).bool()
        return torch.where(sel, a, b)
    return np.where(np.asarray(mask).astype(bool), a, b)


def argmax_labels(probs) -> torch.Tensor:
    """Per-voxel argmax over dim 1 (or 0 for unbatched); ties resolve to the lowest class."""
    probs = torch.as_tensor(probs)
    dim = 1 if probs.ndim == 5 else 0
    # torch.argmax returns the first maximal index
    return torch.argmax(probs, dim=dim)


def pseudo_label(state: NetworkState, x) -> torch.Tensor:
    """Hard labels from ``state`` on ``x``; computed without gradients, so a constant target."""
    return argmax_labels(forward(state, x))


# ------------------------------------------------------------ balanced crops


def centered_patch(voxel, patch_size, vol_shape) -> PatchSpec:
    origin = []
    for v, p, n in zip(voxel, patch_size, vol_shape):
        o = int(v) - p // 2
        o = max(0, min(o, n - p)) if n >= p else min(0, max(o, n - p))
        origin.append(o)
    return PatchSpec(origin, patch_size)


def random_patch(vol_shape, patch_size, rng: np.random.Generator) -> PatchSpec:
    origin = [int(rng.integers(0, n - p + 1)) if n >= p else (n - p) // 2
              for n, p in zip(vol_shape, patch_size)]
    return PatchSpec(origin, patch_size)


def sample_patch_balanced(image, label, target_class: int, patch_size, rng: np.random.Generator) -> PatchSpec:
    """Patch centred on a uniformly chosen voxel of ``target_class`` (clamped in bounds).

    Falls back to a uniform random crop when the class is absent. ``image`` is
    accepted for interface symmetry; only its shape matters.
    """
    labels = np.asarray(getattr(label, "voxels", label))
    coords = np.flatnonzero(labels.ravel() == target_class)
    if coords.size == 0:
        return random_patch(labels.shape, patch_size, rng)
    flat = coords[rng.integers(0, coords.size)]
    return centered_patch(np.unravel_index(flat, labels.shape), patch_size, labels.shape)


class BalancedSampler:
    """Round-robin over foreground classes, one target class per balanced crop.

    With ``foreground_fraction`` < 1 each call is a balanced crop with that
    probability and a uniform random crop otherwise.
    """

    def __init__(self, num_classes: int, patch_size, rng: np.random.Generator,
                 foreground_fraction: float = 1.0):
        if not 0.0 < foreground_fraction <= 1.0:
            raise ValueError(f"foreground_fraction must lie in (0, 1], got {foreground_fraction}")
        self.classes = list(range(1, num_classes)) or [0]
        self.patch_size = tuple(patch_size)
        self.rng = rng
        self.foreground_fraction = foreground_fraction
        self.calls = 0

    def next_class(self) -> int:
        c = self.classes[self.calls % len(self.classes)]
        self.calls += 1
        return c

    def sample(self, image, label) -> PatchSpec:
        ref = label if image is None else image
        shape = np.shape(getattr(ref, "voxels", ref))
        if self.foreground_fraction < 1.0 and self.rng.random() >= self.foreground_fraction:
            return random_patch(shape, self.patch_size, self.rng)
        target = self.next_class()
        if label is None:
            return random_patch(shape, self.patch_size, self.rng)
        return sample_patch_balanced(image, label, target, self.patch_size, self.rng)
