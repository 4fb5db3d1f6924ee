"""Per-class DSC and NSD, and per-case/aggregate result tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .network import ShapeError
from .volume import LabelVolume, atomic_write_text, load_volume

BRUTE_FORCE_MAX_VOXELS = 64**3
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _arrays(pred, gt):
    p = np.asarray(getattr(pred, "voxels", pred))
    g = np.asarray(getattr(gt, "voxels", gt))
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    sp, sg = getattr(pred, "spacing", None), getattr(gt, "spacing", None)
    if sp is not None and sg is not None and not np.allclose(sp, sg):
        raise ShapeError(f"prediction spacing {sp} != ground truth spacing {sg}")
    return p, g


def dsc(pred, gt, class_id: int) -> float:
    """2|P∩G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _arrays(pred, gt)
    p, g = p == class_id, g == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-connected neighbour outside the mask (or the volume)."""
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def _nearest_brute(src: np.ndarray, dst: np.ndarray, budget: int = 4_000_000) -> np.ndarray:
    out = np.empty(len(src))
    chunk = max(1, budget // max(1, len(dst)))
    for i in range(0, len(src), chunk):
        d = src[i:i + chunk, None, :] - dst[None, :, :]
        out[i:i + chunk] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", d, d), axis=1))
    return out


def surface_distances(pred_mask, gt_mask, spacing, method: str = "auto"):
    """Distances (mm) from each boundary voxel of one mask to the other mask's boundary.

    ``brute`` compares every pair of boundary voxel centres; ``edt`` reads a
    Euclidean distance transform of the other boundary. ``auto`` picks brute
    force for volumes up to 64^3.
    """
    bp, bg = boundary(pred_mask), boundary(gt_mask)
    spacing = np.asarray(spacing, dtype=np.float64)
    if method == "auto":
        method = "brute" if bp.size <= BRUTE_FORCE_MAX_VOXELS else "edt"
    if method == "brute":
        pts_p = np.argwhere(bp) * spacing
        pts_g = np.argwhere(bg) * spacing
        return _nearest_brute(pts_p, pts_g), _nearest_brute(pts_g, pts_p)
    if method == "edt":
        dist_to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)
        dist_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
        return dist_to_g[bp], dist_to_p[bg]
    raise ValueError(f"unknown surface distance method {method!r}")


def nsd(pred, gt, class_id: int, tolerance_mm: float, spacing=None, method: str = "auto") -> float:
    """Fraction of both boundaries lying within ``tolerance_mm`` of the other boundary."""
    if tolerance_mm < 0:
        raise ValueError("tolerance_mm must be >= 0")
    p, g = _arrays(pred, gt)
    if spacing is None:
        spacing = getattr(gt, "spacing", (1.0, 1.0, 1.0))
    p, g = p == class_id, g == class_id
    has_p, has_g = bool(p.any()), bool(g.any())
    if not has_p and not has_g:
        return 1.0
    if has_p != has_g:
        return 0.0
    d_pg, d_gp = surface_distances(p, g, spacing, method)
    hits = int(np.sum(d_pg <= tolerance_mm)) + int(np.sum(d_gp <= tolerance_mm))
    return hits / (len(d_pg) + len(d_gp))


# ------------------------------------------------------------------ tables


@dataclass
class CaseResult:
    case_id: str
    dsc: dict  # class name -> value
    nsd: dict = field(default_factory=dict)
    present: dict = field(default_factory=dict)  # class name -> present in pred or gt

    @staticmethod
    def _mean(values: dict, present: dict) -> float:
        keys = [k for k in values if present.get(k, True)]
        return float(np.mean([values[k] for k in keys])) if keys else 1.0

    @property
    def mean_dsc(self) -> float:
        return self._mean(self.dsc, self.present)

    @property
    def mean_nsd(self) -> float:
        return self._mean(self.nsd, self.present) if self.nsd else math.nan


def evaluate_case(case_id, pred: LabelVolume, gt: LabelVolume, class_names: Sequence[str],
                  nsd_tolerance: Optional[float] = None) -> CaseResult:
    """Scores classes 1..len(class_names); class_names[i] names class id i + 1."""
    p, g = _arrays(pred, gt)
    res = CaseResult(case_id, {})
    for cid, name in enumerate(class_names, start=1):
        res.dsc[name] = dsc(p, g, cid)
        res.present[name] = bool((p == cid).any() or (g == cid).any())
        if nsd_tolerance is not None:
            res.nsd[name] = nsd(p, g, cid, nsd_tolerance, spacing=gt.spacing)
    return res


@dataclass
class EvaluationReport:
    class_names: list
    cases: list
    errors: list
    with_nsd: bool = False

    def aggregate(self) -> dict:
        if not self.cases:
            return {}
        agg = {"mean": float(np.mean([c.mean_dsc for c in self.cases]))}
        for name in self.class_names:
            agg[name] = float(np.mean([c.dsc[name] for c in self.cases]))
        if self.with_nsd:
            agg["nsd_mean"] = float(np.mean([c.mean_nsd for c in self.cases]))
            for name in self.class_names:
                agg[f"nsd_{name}"] = float(np.mean([c.nsd[name] for c in self.cases]))
        return agg

    def header(self) -> list:
        cols = ["case", "mean", *self.class_names]
        if self.with_nsd:
            cols += ["nsd_mean", *[f"nsd_{n}" for n in self.class_names]]
        return cols

    def to_csv(self) -> str:
        lines = [",".join(self.header())]

        def row(label, mean, values, nsd_mean=None, nsd_values=None):
            cells = [label, f"{mean:.6f}", *[f"{v:.6f}" for v in values]]
            if self.with_nsd:
                cells += [f"{nsd_mean:.6f}", *[f"{v:.6f}" for v in nsd_values]]
            return ",".join(cells)

        for c in self.cases:
            lines.append(row(c.case_id, c.mean_dsc, [c.dsc[n] for n in self.class_names],
                             c.mean_nsd, [c.nsd.get(n, math.nan) for n in self.class_names]))
        if self.cases:
            agg = self.aggregate()
            lines.append(row("mean", agg["mean"], [agg[n] for n in self.class_names],
                             agg.get("nsd_mean"), [agg.get(f"nsd_{n}") for n in self.class_names]))
        for err in self.errors:
            lines.append(f"# error: {err}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        atomic_write_text(path, self.to_csv())
        return Path(path)


def _case_ids(directory: Path) -> set:
    return {p.stem for p in directory.glob("*.json") if p.with_suffix(".raw").exists()}


def evaluate_dataset(pred_dir, gt_dir, class_names: Sequence[str],
                     nsd_tolerance: Optional[float] = None) -> EvaluationReport:
    """Score every case present in both directories; unmatched cases become errors."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids, gt_ids = _case_ids(pred_dir), _case_ids(gt_dir)
    errors = [f"missing prediction for {cid}" for cid in sorted(gt_ids - pred_ids)]
    errors += [f"missing ground truth for {cid}" for cid in sorted(pred_ids - gt_ids)]
    cases = []
    for cid in sorted(pred_ids & gt_ids):
        pred, gt = load_volume(pred_dir / cid), load_volume(gt_dir / cid)
        try:
            cases.append(evaluate_case(cid, pred, gt, class_names, nsd_tolerance))
        except ShapeError as exc:
            errors.append(f"{cid}: {exc}")
    return EvaluationReport(list(class_names), cases, errors, nsd_tolerance is not None)
