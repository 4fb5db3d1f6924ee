"""Dual-network cross pseudo supervision with CutMix, on top of a supervised objective.

Each iteration draws one labeled patch (class-balanced on the ground truth) and
two unlabeled patches. Both networks are trained on the labeled patch; on the
unlabeled pair each network produces hard pseudo-labels, a single box mask
mixes the two images and each network's pseudo-labels, and each network is
then fit to the *other* network's mixed pseudo-labels.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .cutmix import BalancedSampler, argmax_labels, make_cutmix_mask, mix
from .inference import InferenceConfig, predict_labels_array
from .losses import LossConfig, loss_from_logits
from .network import (
    ConfigurationError,
    NetworkSpec,
    NetworkState,
    build_network,
    forward_logits,
    save_checkpoint,
)
from .phantom import DatasetManifest
from .volume import (
    LabelVolume,
    Volume,
    atomic_write_text,
    extract_patch,
    load_volume,
    normalize_intensity,
    resample,
)

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,sup_a,sup_b,cons_a,cons_b,val_dsc"
DETERMINISTIC_ENV = "SSL_SEG_DETERMINISTIC"


@dataclass
class TrainConfig:
    # protocol defaults for the full-size setting; the phantom experiments override them
    patch_size: tuple = (56, 160, 160)
    batch_size: int = 1
    total_epochs: int = 1000
    iterations_per_epoch: int = 250
    base_lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    lr_halving_period: int = 200
    weight_decay: float = 3e-5
    grad_clip: float = 12.0
    mode: str = "ssl"  # | supervised
    consistency_weight: float = 1.0
    consistency_rampup: float = 0.1  # fraction of total_epochs; 0 = constant weight
    consistency_ramp: str = "linear"  # | sigmoid: exp(-5 (1 - t)^2)
    cutmix_ratio: tuple = (0.25, 0.75)
    literal_eq3: bool = False
    crop_warmup_epochs: int = 10
    crop_refresh_epochs: int = 50
    foreground_fraction: float = 0.33  # balanced crops; the rest are uniform random
    target_spacing: Optional[tuple] = (2.5, 1.5, 1.5)
    clip_lo_pct: float = 0.5
    clip_hi_pct: float = 99.5
    seed: int = 0
    init_seed_a: int = 1
    init_seed_b: int = 2
    checkpoint_every: int = 50
    val_every: int = 0  # 0 = no validation
    deterministic: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        positive = ("batch_size", "total_epochs", "iterations_per_epoch", "lr_halving_period",
                    "crop_refresh_epochs", "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ConfigurationError(f"patch_size must be three positive ints, got {self.patch_size}")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.consistency_weight < 0:
            raise ConfigurationError("consistency_weight must be >= 0")
        if not 0 < self.foreground_fraction <= 1:
            raise ConfigurationError("foreground_fraction must lie in (0, 1]")
        if not 0 <= self.consistency_rampup <= 1:
            raise ConfigurationError("consistency_rampup must lie in [0, 1]")
        if self.consistency_ramp not in ("linear", "sigmoid"):
            raise ConfigurationError(f"consistency_ramp must be 'linear' or 'sigmoid', got {self.consistency_ramp!r}")
        if self.mode not in ("ssl", "supervised"):
            raise ConfigurationError(f"mode must be 'ssl' or 'supervised', got {self.mode!r}")
        if self.init_seed_a == self.init_seed_b:
            raise ConfigurationError("init_seed_a and init_seed_b must differ")
        r_min, r_max = self.cutmix_ratio
        if not 0 < r_min <= r_max < 1:
            raise ConfigurationError(f"cutmix_ratio needs 0 < min <= max < 1, got {self.cutmix_ratio}")
        try:
            self.loss.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: the base rate halves every ``lr_halving_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * 0.5 ** (epoch // cfg.lr_halving_period)


def consistency_weight(epoch: int, cfg: TrainConfig) -> float:
    ramp = cfg.consistency_rampup * cfg.total_epochs
    if ramp <= 0:
        return cfg.consistency_weight
    t = min(1.0, epoch / ramp)
    if cfg.consistency_ramp == "sigmoid":
        t = float(np.exp(-5.0 * (1.0 - t) ** 2))
    return cfg.consistency_weight * t


def is_deterministic(cfg: Optional[TrainConfig] = None) -> bool:
    return os.environ.get(DETERMINISTIC_ENV) == "1" or bool(cfg and cfg.deterministic)


def enable_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ----------------------------------------------------------------- state


@dataclass
class DualState:
    net_a: NetworkState
    net_b: NetworkState
    opt_a: torch.optim.Optimizer
    opt_b: torch.optim.Optimizer
    epoch: int = 0

    @classmethod
    def create(cls, spec: NetworkSpec, cfg: TrainConfig) -> "DualState":
        if cfg.init_seed_a == cfg.init_seed_b:
            raise ConfigurationError("init_seed_a and init_seed_b must differ")
        net_a = build_network(spec, cfg.init_seed_a)
        net_b = build_network(spec, cfg.init_seed_b)
        return cls(net_a, net_b, _optimizer(net_a, cfg), _optimizer(net_b, cfg))

    def networks(self):
        return (self.net_a, self.net_b)

    def optimizers(self):
        return (self.opt_a, self.opt_b)

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers():
            for group in opt.param_groups:
                group["lr"] = lr

    def swapped(self) -> "DualState":
        return DualState(self.net_b, self.net_a, self.opt_b, self.opt_a, self.epoch)


def _optimizer(net: NetworkState, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        net.model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
        nesterov=cfg.nesterov, weight_decay=cfg.weight_decay,
    )


# ----------------------------------------------------------------- steps


def _deep_supervision_loss(net: NetworkState, x, labels, loss_cfg: LossConfig):
    logits, aux = forward_logits(net, x, return_aux=True)
    value = loss_from_logits(logits, labels, loss_cfg)
    if not aux:
        return value.total
    # halving weights per scale, normalised; targets by strided nearest downsampling
    weights = [0.5**i for i in range(len(aux) + 1)]
    total = weights[0] * value.total
    for i, a in enumerate(aux, start=1):
        step = [labels.shape[d + 1] // a.shape[d + 2] for d in range(3)]
        lab = labels[:, :: step[0], :: step[1], :: step[2]]
        total = total + weights[i] * loss_from_logits(a, lab, loss_cfg).total
    return total / sum(weights)


def supervised_losses(dual: DualState, x: torch.Tensor, labels: torch.Tensor, loss_cfg: LossConfig):
    """Each network scored against ground truth; returns graph-attached scalars."""
    out = []
    for net in dual.networks():
        if net.spec.deep_supervision:
            out.append(_deep_supervision_loss(net, x, labels, loss_cfg))
        else:
            out.append(loss_from_logits(forward_logits(net, x), labels, loss_cfg).total)
    return tuple(out)


def _apply(dual: DualState, losses, clip: float) -> None:
    for opt in dual.optimizers():
        opt.zero_grad(set_to_none=True)
    sum(losses).backward()
    for net, opt in zip(dual.networks(), dual.optimizers()):
        if clip and clip > 0:
            torch.nn.utils.clip_grad_norm_(net.model.parameters(), clip)
        opt.step()


def supervised_step(dual: DualState, x, labels, loss_cfg: LossConfig, clip: float = 12.0):
    """One optimiser step of both networks on a labeled batch; returns (loss_a, loss_b)."""
    la, lb = supervised_losses(dual, x, labels, loss_cfg)
    _apply(dual, (la, lb), clip)
    return la.item(), lb.item()


@dataclass
class ConsistencyTerms:
    loss_a: torch.Tensor
    loss_b: torch.Tensor
    mask: object
    x_mix: torch.Tensor
    target_a: torch.Tensor  # fit by network A: B's mixed pseudo-labels
    target_b: torch.Tensor


def _hard_labels(net: NetworkState, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return argmax_labels(torch.softmax(forward_logits(net, x), dim=1))


def consistency_losses(dual: DualState, x_ui, x_uj, ratio_range, rng: np.random.Generator,
                       loss_cfg: LossConfig, literal_eq3: bool = False, mask=None) -> ConsistencyTerms:
    """Cross pseudo supervision on a CutMix of two unlabeled batches.

    Pseudo-labels are computed under ``no_grad`` before any mixing, so they are
    constants for the optimiser. One mask is shared by the image and both
    pseudo-label sets. ``literal_eq3`` reproduces the printed variant in which
    B's label for ``x_ui`` is taken from A's prediction.
    """
    y_a_ui = _hard_labels(dual.net_a, x_ui)
    y_a_uj = _hard_labels(dual.net_a, x_uj)
    y_b_ui = y_a_ui if literal_eq3 else _hard_labels(dual.net_b, x_ui)
    y_b_uj = _hard_labels(dual.net_b, x_uj)
    if mask is None:
        mask = make_cutmix_mask(x_ui.shape[-3:], ratio_range, rng)
    x_mix = mix(x_ui, x_uj, mask)
    y_a_mix = mix(y_a_ui, y_a_uj, mask)
    y_b_mix = mix(y_b_ui, y_b_uj, mask)
    logits_a = forward_logits(dual.net_a, x_mix)
    logits_b = forward_logits(dual.net_b, x_mix)
    loss_a = loss_from_logits(logits_a, y_b_mix, loss_cfg).total
    loss_b = loss_from_logits(logits_b, y_a_mix, loss_cfg).total
    return ConsistencyTerms(loss_a, loss_b, mask, x_mix, y_b_mix, y_a_mix)


def consistency_step(dual: DualState, x_ui, x_uj, ratio_range, rng, loss_cfg: LossConfig,
                     clip: float = 12.0, literal_eq3: bool = False):
    terms = consistency_losses(dual, x_ui, x_uj, ratio_range, rng, loss_cfg, literal_eq3)
    _apply(dual, (terms.loss_a, terms.loss_b), clip)
    return terms.loss_a.item(), terms.loss_b.item()


# -------------------------------------------------------------- data


def preprocess_image(vol: Volume, cfg: TrainConfig) -> Volume:
    if cfg.target_spacing is not None:
        vol = resample(vol, cfg.target_spacing, "linear")
    return normalize_intensity(vol, cfg.clip_lo_pct, cfg.clip_hi_pct)


def preprocess_label(lab: LabelVolume, cfg: TrainConfig) -> LabelVolume:
    if cfg.target_spacing is not None:
        lab = resample(lab, cfg.target_spacing, "nearest")
    return lab


@dataclass
class TrainingData:
    images: list  # preprocessed Volumes
    labels: list  # LabelVolumes
    unlabeled: list  # preprocessed Volumes
    num_classes: int

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, cfg: TrainConfig, load_unlabeled: bool = True):
        if manifest.n_labeled == 0:
            raise ConfigurationError("manifest has no labeled cases")
        images, labels = [], []
        for img_rel, lab_rel in manifest.labeled_cases:
            images.append(preprocess_image(load_volume(manifest.path(img_rel)), cfg))
            labels.append(preprocess_label(load_volume(manifest.path(lab_rel)), cfg))
        unlabeled = []
        if load_unlabeled:
            unlabeled = [preprocess_image(load_volume(manifest.path(rel)), cfg)
                         for rel in manifest.unlabeled_cases]
        return cls(images, labels, unlabeled, manifest.num_classes)


def _stack(vols, specs, pad_value=0.0) -> torch.Tensor:
    arrays = [extract_patch(v, s, pad_value).voxels for v, s in zip(vols, specs)]
    return torch.from_numpy(np.stack(arrays))


@dataclass
class TrainResult:
    out_dir: Path
    log_path: Path
    dual: DualState
    history: list
    seconds: float


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _validation_dsc(net: NetworkState, val_data, patch_size) -> float:
    from .metrics import dsc

    icfg = InferenceConfig(patch_size=tuple(patch_size), overlap=0.5, target_spacing=None,
                           normalize=False)
    scores = []
    for image, label in zip(val_data.images, val_data.labels):
        pred = predict_labels_array(net, image.voxels, val_data.num_classes, icfg)
        pred_vol = LabelVolume(pred, label.spacing, label.num_classes)
        scores.extend(dsc(pred_vol, label, c) for c in range(1, val_data.num_classes))
    return float(np.mean(scores))


def train(manifest: DatasetManifest, cfg: TrainConfig, spec: NetworkSpec, out_dir,
          val_manifest: Optional[DatasetManifest] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the full loop, writing ``train_log.csv`` and ``ckpt/epoch_<n>/net_{a,b}`` under ``out_dir``."""
    cfg.validate()
    spec.validate()
    spec.check_patch_size(cfg.patch_size)
    if spec.num_classes != manifest.num_classes:
        raise ConfigurationError(
            f"num_classes: network has {spec.num_classes}, dataset has {manifest.num_classes}"
        )
    if is_deterministic(cfg):
        enable_determinism()
    torch.manual_seed(cfg.seed)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    use_ssl = cfg.mode == "ssl" and manifest.n_unlabeled > 0
    data = TrainingData.from_manifest(manifest, cfg, load_unlabeled=use_ssl)
    val_data = TrainingData.from_manifest(val_manifest, cfg, False) if val_manifest else None

    # independent streams, so the labeled sequence never depends on whether SSL runs
    ss = np.random.SeedSequence(cfg.seed)
    rng_lab, rng_unl, rng_mask = (np.random.default_rng(s) for s in ss.spawn(3))
    lab_sampler = BalancedSampler(data.num_classes, cfg.patch_size, rng_lab, cfg.foreground_fraction)
    unl_sampler = BalancedSampler(data.num_classes, cfg.patch_size, rng_unl, cfg.foreground_fraction)
    crop_labels: list = [None] * len(data.unlabeled)

    dual = DualState.create(spec, cfg)
    for net in dual.networks():
        net.model.train()

    rows, history = [LOG_HEADER], []
    log_path = out_dir / "train_log.csv"
    t0 = time.perf_counter()
    for epoch in range(cfg.total_epochs):
        dual.epoch = epoch
        lr = lr_schedule(epoch, cfg)
        dual.set_lr(lr)
        lam = consistency_weight(epoch, cfg)

        if use_ssl and epoch >= cfg.crop_warmup_epochs and \
                (epoch - cfg.crop_warmup_epochs) % cfg.crop_refresh_epochs == 0:
            crop_labels = _crop_pseudo_labels(dual.net_a, data, cfg.patch_size)

        sums = np.zeros(4)
        for _ in range(cfg.iterations_per_epoch):
            idx = rng_lab.integers(0, len(data.images), size=cfg.batch_size)
            specs = [lab_sampler.sample(data.images[i], data.labels[i]) for i in idx]
            x = _stack([data.images[i] for i in idx], specs)[:, None]
            y = torch.from_numpy(
                np.stack([extract_patch(data.labels[i], s).voxels for i, s in zip(idx, specs)])
            ).long()
            sup_a, sup_b = supervised_losses(dual, x, y, cfg.loss)
            losses = [sup_a, sup_b]
            cons = (0.0, 0.0)
            if use_ssl:
                x_ui, x_uj = _unlabeled_pair(data, crop_labels, unl_sampler, rng_unl, cfg.batch_size)
                terms = consistency_losses(dual, x_ui, x_uj, cfg.cutmix_ratio, rng_mask,
                                           cfg.loss, cfg.literal_eq3)
                losses = [sup_a + lam * terms.loss_a, sup_b + lam * terms.loss_b]
                cons = (terms.loss_a.item(), terms.loss_b.item())
            _apply(dual, losses, cfg.grad_clip)
            sums += (sup_a.item(), sup_b.item(), *cons)

        means = sums / cfg.iterations_per_epoch
        if not np.all(np.isfinite(means)):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: {means.tolist()}")
        val = None
        if val_data is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            val = _validation_dsc(dual.net_a, val_data, cfg.patch_size)
        record = {"epoch": epoch, "lr": lr, "sup_a": means[0], "sup_b": means[1],
                  "cons_a": means[2], "cons_b": means[3], "val_dsc": val}
        history.append(record)
        rows.append(",".join([str(epoch), _fmt(lr)] + [_fmt(m) for m in means] + [_fmt(val)]))
        atomic_write_text(log_path, "\n".join(rows) + "\n")
        logger.info("epoch %d lr %.5f sup %.4f/%.4f cons %.4f/%.4f", epoch, lr, *means)
        if on_epoch:
            on_epoch(record)
        last = epoch + 1 == cfg.total_epochs
        if (epoch + 1) % cfg.checkpoint_every == 0 or last:
            save_dual(dual, out_dir / "ckpt" / f"epoch_{epoch + 1}")
    return TrainResult(out_dir, log_path, dual, history, time.perf_counter() - t0)


def save_dual(dual: DualState, directory) -> Path:
    directory = Path(directory)
    save_checkpoint(dual.net_a, directory / "net_a")
    save_checkpoint(dual.net_b, directory / "net_b")
    return directory


def final_checkpoint(out_dir, net: str = "a") -> Path:
    """Latest ``ckpt/epoch_<n>/net_<net>`` directory under a training output."""
    ckpts = sorted(Path(out_dir, "ckpt").glob("epoch_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return ckpts[-1] / f"net_{net}"


def _crop_pseudo_labels(net: NetworkState, data: TrainingData, patch_size) -> list:
    """Whole-volume labels from ``net``, used only to steer class-balanced cropping."""
    icfg = InferenceConfig(patch_size=tuple(patch_size), overlap=0.0, target_spacing=None,
                           normalize=False)
    net.model.eval()
    try:
        return [predict_labels_array(net, v.voxels, data.num_classes, icfg) for v in data.unlabeled]
    finally:
        net.model.train()


def _unlabeled_pair(data: TrainingData, crop_labels, sampler: BalancedSampler,
                    rng: np.random.Generator, batch_size: int):
    """Two batches of unlabeled patches, drawn from distinct cases when possible."""
    m = len(data.unlabeled)
    pair = ([], [])
    for _ in range(batch_size):
        ij = rng.choice(m, size=2, replace=False) if m >= 2 else (0, 0)
        for slot, k in zip(pair, ij):
            vol = data.unlabeled[k]
            slot.append(extract_patch(vol, sampler.sample(vol, crop_labels[k])).voxels)
    return tuple(torch.from_numpy(np.stack(p))[:, None] for p in pair)
