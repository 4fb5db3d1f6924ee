"""Robust segmentation loss (noise-robust Dice + Taylor CE), Dice+CE baseline, gradient check.

All losses take softmax probabilities ``mu`` and a one-hot target ``upsilon`` of
shape ``(C, *spatial)`` or ``(N, C, *spatial)``. Batched inputs are scored per
sample and averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

CE_CLAMP = 1e-7


@dataclass
class LossConfig:
    loss: str = "rs"  # rs | dice_ce
    gamma: float = 1.5
    epsilon: float = 1e-5
    reduction: str = "mean_over_voxels"  # | sum_over_voxels
    class_set: str = "foreground_only"  # | all_classes
    nrd_aggregation: str = "per_class"  # | global
    # NRD on a class absent from the target: for gamma < 2 the ratio grows as the
    # prediction for that class goes to 0, so absent classes are skipped by default
    empty_classes: str = "skip"  # | keep

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.reduction not in ("mean_over_voxels", "sum_over_voxels"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.class_set not in ("foreground_only", "all_classes"):
            raise ValueError(f"unknown class_set {self.class_set!r}")
        if self.nrd_aggregation not in ("per_class", "global"):
            raise ValueError(f"unknown nrd_aggregation {self.nrd_aggregation!r}")
        if self.empty_classes not in ("skip", "keep"):
            raise ValueError(f"unknown empty_classes {self.empty_classes!r}")


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total)


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """``(N, *spatial)`` or ``(*spatial)`` integer labels -> channel-first one-hot."""
    labels = labels.long()
    oh = F.one_hot(labels, num_classes)
    return oh.movedim(-1, 1 if labels.ndim == 4 else 0)


def _batched(mu, upsilon):
    if mu.shape != upsilon.shape:
        raise ValueError(f"mu {tuple(mu.shape)} and upsilon {tuple(upsilon.shape)} differ")
    if mu.ndim == 4:
        return mu.unsqueeze(0), upsilon.unsqueeze(0).to(mu.dtype)
    if mu.ndim != 5:
        raise ValueError(f"expected (C, D, W, H) or (N, C, D, W, H), got {tuple(mu.shape)}")
    return mu, upsilon.to(mu.dtype)


def _class_slice(cfg: LossConfig, num_classes: int) -> slice:
    return slice(1, None) if cfg.class_set == "foreground_only" and num_classes > 1 else slice(None)


def _abs_pow(x: torch.Tensor, gamma: float) -> torch.Tensor:
    # |x|^gamma with the derivative at x == 0 pinned to 0
    a = x.abs()
    nz = a > 0
    return torch.where(nz, torch.where(nz, a, torch.ones_like(a)) ** gamma, torch.zeros_like(a))


def nrd_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Noise-robust Dice: sum |mu - v|^gamma / (sum mu^2 + sum v^2 + eps), per class.

    With ``empty_classes="skip"`` classes absent from ``upsilon`` are left out of
    the class mean; a sample with no scored class contributes 0.
    """
    if not cfg.gamma > 0 or not cfg.epsilon > 0:
        raise ValueError("gamma and epsilon must be > 0")
    mu, ups = _batched(mu, upsilon)
    sel = _class_slice(cfg, mu.shape[1])
    mu, ups = mu[:, sel], ups[:, sel]
    dims = tuple(range(2, mu.ndim))
    num = _abs_pow(mu - ups, cfg.gamma).sum(dims)
    den = (mu * mu).sum(dims) + (ups * ups).sum(dims)
    keep = ups.sum(dims) > 0 if cfg.empty_classes == "skip" else torch.ones_like(num, dtype=torch.bool)
    zero = torch.zeros_like(num)
    if cfg.nrd_aggregation == "global":
        per_sample = torch.where(keep, num, zero).sum(1) / (torch.where(keep, den, zero).sum(1) + cfg.epsilon)
    else:
        ratio = torch.where(keep, num / (den + cfg.epsilon), zero)
        per_sample = ratio.sum(1)
        if cfg.reduction != "sum_over_voxels":
            per_sample = per_sample / keep.sum(1).clamp(min=1)
    return per_sample.mean()


def true_class_prob(mu, upsilon) -> torch.Tensor:
    mu, ups = _batched(mu, upsilon)
    return (mu * ups).sum(1)


def _reduce_voxels(x: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    dims = tuple(range(1, x.ndim))
    per_sample = x.sum(dims) if cfg.reduction == "sum_over_voxels" else x.mean(dims)
    return per_sample.mean()


def tce_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Taylor cross entropy: (1 - p) + (1 - p)^2 / 2 with p the true-class probability."""
    q = 1.0 - true_class_prob(mu, upsilon)
    return _reduce_voxels(q + 0.5 * q * q, cfg)


def soft_dice_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    mu, ups = _batched(mu, upsilon)
    sel = _class_slice(cfg, mu.shape[1])
    mu, ups = mu[:, sel], ups[:, sel]
    dims = tuple(range(2, mu.ndim))
    dice = 2 * (mu * ups).sum(dims) / ((mu * mu).sum(dims) + (ups * ups).sum(dims) + cfg.epsilon)
    return (1.0 - dice).mean()


def ce_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    p = true_class_prob(mu, upsilon).clamp(CE_CLAMP, 1.0)
    return _reduce_voxels(-torch.log(p), cfg)


def dice_ce_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> LossValue:
    dice = soft_dice_loss(mu, upsilon, cfg)
    ce = ce_loss(mu, upsilon, cfg)
    return LossValue(dice + ce, {"dice": dice, "ce": ce})


def rs_loss(mu, upsilon, cfg: LossConfig = LossConfig()) -> LossValue:
    nrd = nrd_loss(mu, upsilon, cfg)
    tce = tce_loss(mu, upsilon, cfg)
    return LossValue(nrd + tce, {"nrd": nrd, "tce": tce})


LOSSES = {"rs": rs_loss, "dice_ce": dice_ce_loss}


def segmentation_loss(mu, upsilon, cfg: LossConfig) -> LossValue:
    return LOSSES[cfg.loss](mu, upsilon, cfg)


def loss_from_logits(logits, labels, cfg: LossConfig) -> LossValue:
    """Softmax ``logits`` (N, C, ...) and score them against integer ``labels`` (N, ...)."""
    mu = torch.softmax(logits, dim=1)
    return segmentation_loss(mu, one_hot(labels, logits.shape[1]), cfg)


# ---------------------------------------------------------- gradient check

_SCALAR_LOSSES = {
    "nrd": nrd_loss,
    "tce": tce_loss,
    "dice_ce": lambda m, u, c: dice_ce_loss(m, u, c).total,
    "rs": lambda m, u, c: rs_loss(m, u, c).total,
}


def gradient_check(loss_id: str, mu, upsilon, step: float = 1e-5, cfg: LossConfig = LossConfig()) -> float:
    """Max relative error between the autograd gradient w.r.t. ``mu`` and central differences.

    Each entry of ``mu`` is perturbed independently without renormalisation, so
    the derivative is taken w.r.t. the raw probabilities. Runs in float64.
    """
    fn = _SCALAR_LOSSES[loss_id]
    mu = torch.as_tensor(mu, dtype=torch.float64).detach().clone()
    ups = torch.as_tensor(upsilon, dtype=torch.float64)
    x = mu.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x, ups, cfg), x)
    analytic = analytic.numpy().ravel()

    flat = mu.view(-1)
    numeric = np.empty_like(analytic)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            f_plus = float(fn(mu, ups, cfg))
            flat[i] = orig - step
            f_minus = float(fn(mu, ups, cfg))
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-10)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_prob_field(rng: np.random.Generator, num_classes=3, shape=(4, 4, 4), lo=0.05, hi=0.95):
    """Random interior probability field and matching one-hot target, as float64 tensors."""
    mu = rng.uniform(lo, hi, size=(num_classes, *shape))
    mu = mu / mu.sum(0, keepdims=True)
    labels = rng.integers(0, num_classes, size=shape)
    ups = np.eye(num_classes)[labels].transpose(3, 0, 1, 2)
    return torch.from_numpy(mu), torch.from_numpy(ups)
