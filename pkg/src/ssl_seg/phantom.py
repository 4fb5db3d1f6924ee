"""Deterministic ellipsoid phantoms standing in for labeled and unlabeled CT."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .volume import LabelVolume, Volume, atomic_write_text, save_volume

MAX_PLACEMENT_RETRIES = 100
AXIS_FRACTION_RANGE = (0.08, 0.30)


class PhantomGenerationError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    seed: int = 0
    shape: tuple = (64, 64, 64)
    spacing: tuple = (2.5, 1.5, 1.5)
    num_classes: int = 4
    noise_sigma: float = 0.1
    min_voxels_per_class: int = 200
    intensity_means: Optional[tuple] = None

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.intensity_means is None:
            self.intensity_means = tuple(float(c) for c in range(self.num_classes))
        self.intensity_means = tuple(float(m) for m in self.intensity_means)
        self.validate()

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.min_voxels_per_class < 1:
            raise ValueError("min_voxels_per_class must be >= 1")
        if len(self.intensity_means) != self.num_classes:
            raise ValueError(
                f"need {self.num_classes} intensity means, got {len(self.intensity_means)}"
            )
        if len(set(self.intensity_means)) != self.num_classes:
            raise ValueError("intensity_means must be pairwise distinct")
        if self.min_voxels_per_class * (self.num_classes - 1) >= int(np.prod(self.shape)):
            raise ValueError("min_voxels_per_class * (C - 1) must be below the voxel count")

    @property
    def min_mean_gap(self) -> float:
        means = np.sort(np.asarray(self.intensity_means))
        return float(np.min(np.diff(means)))


def _ellipsoid_mask(shape, rng: np.random.Generator) -> np.ndarray:
    shape = np.asarray(shape)
    centre = rng.uniform(0, shape)
    semi_axes = rng.uniform(*AXIS_FRACTION_RANGE, size=3) * shape
    rot = Rotation.random(random_state=rng).as_matrix()
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    local = (grid - centre) @ rot  # coordinates in the ellipsoid frame
    return np.sum((local / semi_axes) ** 2, axis=-1) <= 1.0


def generate_case(cfg: PhantomConfig, case_seed: int) -> tuple[Volume, LabelVolume]:
    """Build one labeled phantom, fully determined by ``(cfg.seed, case_seed)``.

    Classes 1..C-1 are drawn as randomly rotated ellipsoids in order, later ones
    overwriting earlier ones. A placement is rejected when any class (including
    background) ends up with fewer than ``min_voxels_per_class`` voxels.
    """
    rng = np.random.default_rng([int(cfg.seed), int(case_seed)])
    counts = None
    for _ in range(MAX_PLACEMENT_RETRIES):
        labels = np.zeros(cfg.shape, dtype=np.uint8)
        for c in range(1, cfg.num_classes):
            labels[_ellipsoid_mask(cfg.shape, rng)] = c
        counts = np.bincount(labels.ravel(), minlength=cfg.num_classes)
        if counts[1:].min() >= cfg.min_voxels_per_class and counts[0] > 0:
            break
    else:
        raise PhantomGenerationError(
            f"could not place {cfg.num_classes - 1} ellipsoids with >= "
            f"{cfg.min_voxels_per_class} voxels each after {MAX_PLACEMENT_RETRIES} tries "
            f"(last counts {counts.tolist()})"
        )
    means = np.asarray(cfg.intensity_means, dtype=np.float64)
    image = means[labels]
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=cfg.shape)
    return Volume(image, cfg.spacing), LabelVolume(labels, cfg.spacing, cfg.num_classes)


@dataclass
class DatasetManifest:
    """Relative paths (without extension) of labeled and unlabeled cases."""

    root: Path
    labeled_cases: list = field(default_factory=list)  # [(image, label)]
    unlabeled_cases: list = field(default_factory=list)  # [image]
    hidden_labels: list = field(default_factory=list)  # [label], evaluation only
    seed: int = 0
    num_classes: int = 2

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_cases)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_cases)

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    @staticmethod
    def case_id(rel: str) -> str:
        return Path(rel).name

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "N": self.n_labeled,
            "M": self.n_unlabeled,
            "labeled": [{"image": i, "label": l} for i, l in self.labeled_cases],
            "unlabeled": [{"image": i} for i in self.unlabeled_cases],
            "hidden": list(self.hidden_labels),
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / "manifest.json"
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text(encoding="utf-8"))
        manifest = cls(
            root=path.parent,
            labeled_cases=[(c["image"], c["label"]) for c in doc.get("labeled", [])],
            unlabeled_cases=[c["image"] for c in doc.get("unlabeled", [])],
            hidden_labels=list(doc.get("hidden", [])),
            seed=int(doc.get("seed", 0)),
            num_classes=int(doc.get("num_classes", 2)),
        )
        if doc.get("N", manifest.n_labeled) != manifest.n_labeled:
            raise ValueError(f"{path}: N does not match the labeled case list")
        if doc.get("M", manifest.n_unlabeled) != manifest.n_unlabeled:
            raise ValueError(f"{path}: M does not match the unlabeled case list")
        return manifest


def generate_dataset(cfg: PhantomConfig, n_labeled: int, n_unlabeled: int, out_dir) -> DatasetManifest:
    """Write ``n_labeled`` image/label pairs and ``n_unlabeled`` images under ``out_dir``.

    Labels of the unlabeled cases go to ``hidden/`` and are never read by training.
    """
    if n_labeled < 1:
        raise ValueError("n_labeled must be >= 1")
    if n_unlabeled < 0:
        raise ValueError("n_unlabeled must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(root=out, seed=cfg.seed, num_classes=cfg.num_classes)
    for i in range(n_labeled):
        name = f"case_{i:04d}"
        image, label = generate_case(cfg, i)
        save_volume(image, out / "images" / name)
        save_volume(label, out / "labels" / name)
        manifest.labeled_cases.append((f"images/{name}", f"labels/{name}"))
    for j in range(n_unlabeled):
        name = f"case_{n_labeled + j:04d}"
        image, label = generate_case(cfg, n_labeled + j)
        save_volume(image, out / "unlabeled" / name)
        save_volume(label, out / "hidden" / name)
        manifest.unlabeled_cases.append(f"unlabeled/{name}")
        manifest.hidden_labels.append(f"hidden/{name}")
    manifest.save()
    return manifest
