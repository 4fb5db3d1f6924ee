"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import difflib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .inference import InferenceConfig
from .losses import LossConfig
from .network import ConfigurationError, NetworkSpec
from .phantom import PhantomConfig
from .trainer import TrainConfig
from .volume import atomic_write_text


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _tuple(cast, n=None):
    def parse(text: str):
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        values = tuple(cast(p.strip()) for p in parts)
        if n is not None and len(values) != n:
            raise ValueError(f"expected {n} comma-separated values, got {text!r}")
        return values
    return parse


def _optional(parse):
    def wrapped(text: str):
        return None if text.strip().lower() in ("none", "auto", "") else parse(text)
    return wrapped


def _choice(*options):
    def parse(text: str):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t
    return parse


def _names(text: str):
    return tuple(p.strip() for p in text.split(",") if p.strip()) or None


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


KEYS: dict[str, Key] = {
    # general
    "seed": Key(int, 0, "training seed (patch sampling, masks)"),
    "deterministic": Key(_bool, False, "single-threaded deterministic torch kernels"),
    # phantom data
    "data_seed": Key(_optional(int), None, "phantom dataset seed; defaults to seed"),
    "shape": Key(_tuple(int, 3), (64, 64, 64), "phantom volume shape"),
    "spacing": Key(_tuple(float, 3), (2.5, 1.5, 1.5), "phantom voxel spacing (mm)"),
    "num_classes": Key(int, 4, "classes including background"),
    "noise_sigma": Key(float, 0.1, "phantom Gaussian noise"),
    "min_voxels_per_class": Key(int, 200, ""),
    "intensity_means": Key(_optional(_tuple(float)), None, "per-class phantom means; default 0..C-1"),
    "n_labeled": Key(int, 4, ""),
    "n_unlabeled": Key(int, 40, ""),
    "n_test": Key(int, 10, "held-out cases for experiments"),
    "test_seed": Key(int, 1000, "phantom seed of the held-out set"),
    # network
    "in_channels": Key(int, 1, ""),
    "num_stages": Key(int, 4, ""),
    "base_channels": Key(int, 16, ""),
    "channel_multiplier": Key(int, 2, ""),
    "max_channels": Key(int, 128, ""),
    "kernel_size": Key(int, 3, ""),
    "downsample_stride": Key(_tuple(int, 3), (2, 2, 2), "stride of every stage after the first"),
    "arch": Key(_choice("separable", "regular"), "separable", "conv mode"),
    "use_residual": Key(_bool, True, ""),
    "deep_supervision": Key(_bool, False, ""),
    # loss
    "loss": Key(_choice("rs", "dice_ce"), "rs", ""),
    "gamma": Key(float, 1.5, "noise-robust Dice exponent"),
    "epsilon": Key(float, 1e-5, "Dice denominator stabiliser"),
    "reduction": Key(_choice("mean_over_voxels", "sum_over_voxels"), "mean_over_voxels", ""),
    "class_set": Key(_choice("foreground_only", "all_classes"), "foreground_only", ""),
    "nrd_aggregation": Key(_choice("per_class", "global"), "per_class", ""),
    "empty_classes": Key(_choice("skip", "keep"), "skip", "NRD on classes absent from the target"),
    # training
    "mode": Key(_choice("ssl", "supervised"), "ssl", ""),
    "patch_size": Key(_tuple(int, 3), (56, 160, 160), ""),
    "batch_size": Key(int, 1, ""),
    "total_epochs": Key(int, 1000, ""),
    "iterations_per_epoch": Key(int, 250, ""),
    "base_lr": Key(float, 0.01, ""),
    "momentum": Key(float, 0.99, ""),
    "nesterov": Key(_bool, True, ""),
    "lr_halving_period": Key(int, 200, "epochs per learning-rate halving"),
    "weight_decay": Key(float, 3e-5, ""),
    "grad_clip": Key(float, 12.0, "max gradient norm; 0 disables"),
    "consistency_weight": Key(float, 1.0, "lambda"),
    "consistency_rampup": Key(float, 0.1, "fraction of epochs for the lambda ramp"),
    "consistency_ramp": Key(_choice("linear", "sigmoid"), "linear", "ramp shape"),
    "cutmix_ratio_min": Key(float, 0.25, ""),
    "cutmix_ratio_max": Key(float, 0.75, ""),
    "literal_eq3": Key(_bool, False, "take B's pseudo-label on x_ui from A (printed variant)"),
    "crop_warmup_epochs": Key(int, 10, ""),
    "crop_refresh_epochs": Key(int, 50, ""),
    "foreground_fraction": Key(float, 0.33, "share of class-balanced crops; the rest are random"),
    "target_spacing": Key(_optional(_tuple(float, 3)), (2.5, 1.5, 1.5), "'none' keeps native spacing"),
    "clip_lo_pct": Key(float, 0.5, ""),
    "clip_hi_pct": Key(float, 99.5, ""),
    "init_seed_a": Key(_optional(int), None, "defaults to 2*seed+1"),
    "init_seed_b": Key(_optional(int), None, "defaults to 2*seed+2"),
    "checkpoint_every": Key(int, 50, ""),
    "val_every": Key(int, 0, ""),
    "deploy_net": Key(_choice("a", "b"), "a", "network used for inference"),
    # inference
    "overlap": Key(float, 0.5, ""),
    "sigma_scale": Key(float, 0.125, ""),
    "weighting": Key(_choice("gaussian", "uniform"), "gaussian", ""),
    "tta": Key(_choice("none", "flips3"), "none", ""),
    "fusion": Key(_choice("full_prob", "label_only"), "full_prob", ""),
    "resample_back": Key(_bool, True, ""),
    "max_prob_voxels": Key(int, 2_000_000_000, "full_prob capacity budget (C x voxels)"),
    # evaluation
    "nsd_tolerance": Key(_optional(float), None, "mm; omit to skip NSD"),
    "class_names": Key(_optional(_names), None, "comma-separated foreground names"),
}


def parse_pairs(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> value`` strings of a flat config; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise unknown_key_error(key)
        pairs[key] = value
    return pairs


def read_config_pairs(path) -> dict:
    return parse_pairs(Path(path).read_text(encoding="utf-8"), str(path))


def unknown_key_error(key: str) -> ConfigurationError:
    close = difflib.get_close_matches(key, KEYS.keys(), n=1, cutoff=0.6)
    hint = f"; did you mean '{close[0]}'?" if close else ""
    err = ConfigurationError(f"unknown config key '{key}'{hint}")
    err.key = key
    return err


class RunConfig:
    """Resolved key-value map: defaults < config file < command-line overrides."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise unknown_key_error(key)
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value)
            except ValueError as exc:
                err = ConfigurationError(f"config key '{key}': {exc}")
                err.key = key
                raise err from None
        self.values[key] = value

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise unknown_key_error(key)
        return self.values[key]

    def update(self, pairs: dict) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def copy(self, **overrides) -> "RunConfig":
        out = RunConfig()
        out.values = dict(self.values)
        return out.update(overrides)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls().update(parse_pairs(text, source))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls().update(read_config_pairs(path))

    # resolution of derived defaults
    def resolved(self) -> "RunConfig":
        out = self.copy()
        v = out.values
        if v["data_seed"] is None:
            v["data_seed"] = v["seed"]
        if v["init_seed_a"] is None:
            v["init_seed_a"] = 2 * v["seed"] + 1
        if v["init_seed_b"] is None:
            v["init_seed_b"] = 2 * v["seed"] + 2
        if v["intensity_means"] is None:
            v["intensity_means"] = tuple(float(c) for c in range(v["num_classes"]))
        if v["class_names"] is None:
            v["class_names"] = tuple(f"class_{c}" for c in range(1, v["num_classes"]))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in KEYS)

    def write(self, path) -> Path:
        atomic_write_text(path, self.resolved().to_text())
        return Path(path)

    # typed views
    def phantom_config(self) -> PhantomConfig:
        v = self.resolved().values
        return PhantomConfig(
            seed=v["data_seed"], shape=v["shape"], spacing=v["spacing"],
            num_classes=v["num_classes"], noise_sigma=v["noise_sigma"],
            min_voxels_per_class=v["min_voxels_per_class"], intensity_means=v["intensity_means"],
        )

    def network_spec(self) -> NetworkSpec:
        v = self.values
        strides = ((1, 1, 1),) + (tuple(v["downsample_stride"]),) * (v["num_stages"] - 1)
        spec = NetworkSpec(
            in_channels=v["in_channels"], num_classes=v["num_classes"], num_stages=v["num_stages"],
            base_channels=v["base_channels"], channel_multiplier=v["channel_multiplier"],
            max_channels=v["max_channels"], kernel_size=v["kernel_size"],
            downsample_strides=strides, conv_mode=v["arch"], use_residual=v["use_residual"],
            deep_supervision=v["deep_supervision"],
        )
        spec.validate()
        return spec

    def loss_config(self) -> LossConfig:
        v = self.values
        cfg = LossConfig(loss=v["loss"], gamma=v["gamma"], epsilon=v["epsilon"],
                         reduction=v["reduction"], class_set=v["class_set"],
                         nrd_aggregation=v["nrd_aggregation"], empty_classes=v["empty_classes"])
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        return cfg

    def train_config(self) -> TrainConfig:
        v = self.resolved().values
        cfg = TrainConfig(
            patch_size=v["patch_size"], batch_size=v["batch_size"], total_epochs=v["total_epochs"],
            iterations_per_epoch=v["iterations_per_epoch"], base_lr=v["base_lr"],
            momentum=v["momentum"], nesterov=v["nesterov"], lr_halving_period=v["lr_halving_period"],
            weight_decay=v["weight_decay"], grad_clip=v["grad_clip"], mode=v["mode"],
            consistency_weight=v["consistency_weight"], consistency_rampup=v["consistency_rampup"],
            consistency_ramp=v["consistency_ramp"],
            cutmix_ratio=(v["cutmix_ratio_min"], v["cutmix_ratio_max"]),
            literal_eq3=v["literal_eq3"], crop_warmup_epochs=v["crop_warmup_epochs"],
            crop_refresh_epochs=v["crop_refresh_epochs"],
            foreground_fraction=v["foreground_fraction"], target_spacing=v["target_spacing"],
            clip_lo_pct=v["clip_lo_pct"], clip_hi_pct=v["clip_hi_pct"], seed=v["seed"],
            init_seed_a=v["init_seed_a"], init_seed_b=v["init_seed_b"],
            checkpoint_every=v["checkpoint_every"], val_every=v["val_every"],
            deterministic=v["deterministic"], loss=self.loss_config(),
        )
        cfg.validate()
        return cfg

    def inference_config(self) -> InferenceConfig:
        v = self.values
        cfg = InferenceConfig(
            patch_size=v["patch_size"], overlap=v["overlap"], sigma_scale=v["sigma_scale"],
            weighting=v["weighting"], tta=v["tta"], accumulation=v["fusion"],
            target_spacing=v["target_spacing"], resample_back=v["resample_back"],
            clip_lo_pct=v["clip_lo_pct"], clip_hi_pct=v["clip_hi_pct"],
            max_prob_voxels=v["max_prob_voxels"],
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        return cfg
