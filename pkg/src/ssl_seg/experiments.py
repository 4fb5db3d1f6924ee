"""Desk-scale phantom experiments: supervised-vs-SSL ablation and loss comparison.

Every arm (data generation, one training run + held-out evaluation) lives in
its own directory with the resolved config beside it; an arm whose directory
already holds a ``DONE`` marker for the identical config is reused instead of
recomputed.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .inference import predict_volume
from .metrics import evaluate_dataset
from .network import load_checkpoint
from .phantom import DatasetManifest, generate_dataset
from .trainer import final_checkpoint, train
from .volume import atomic_write_text, load_volume, save_volume

logger = logging.getLogger(__name__)

DATA_KEYS = ("data_seed", "test_seed", "shape", "spacing", "num_classes", "noise_sigma",
             "min_voxels_per_class", "intensity_means", "n_labeled", "n_unlabeled", "n_test")


def toy_config(**overrides) -> RunConfig:
    """The phantom setting used by the ablation: 64^3, four classes, 4 + 40 training cases."""
    cfg = RunConfig().update(dict(
        shape=(64, 64, 64), spacing=(2.5, 1.5, 1.5), target_spacing=(2.5, 1.5, 1.5),
        num_classes=4, noise_sigma=0.6, intensity_means=(0.0, 1.0, 2.0, 3.0),
        n_labeled=4, n_unlabeled=40, n_test=10, data_seed=0, test_seed=1000,
        patch_size=(16, 16, 16), total_epochs=60, iterations_per_epoch=50,
        crop_warmup_epochs=10, crop_refresh_epochs=25, checkpoint_every=60,
        overlap=0.5, tta="none", fusion="full_prob",
        momentum=0.9,  # 0.99 saturates the softmax within one epoch at this batch size
    ))
    return cfg.update(overrides)


def _data_fingerprint(cfg: RunConfig) -> str:
    r = cfg.resolved()
    return "".join(f"{k} = {r[k]!r}\n" for k in DATA_KEYS)


def prepare_data(cfg: RunConfig, workdir) -> tuple[DatasetManifest, DatasetManifest]:
    """Training set (N labeled + M unlabeled) and a disjoint held-out set, generated once."""
    data_dir = Path(workdir) / "data"
    stamp = data_dir / "DONE"
    fingerprint = _data_fingerprint(cfg)
    if stamp.exists() and stamp.read_text() == fingerprint:
        return DatasetManifest.load(data_dir / "train"), DatasetManifest.load(data_dir / "test")
    r = cfg.resolved()
    train_m = generate_dataset(r.phantom_config(), r["n_labeled"], r["n_unlabeled"], data_dir / "train")
    test_m = generate_dataset(r.copy(data_seed=r["test_seed"]).phantom_config(), r["n_test"], 0,
                              data_dir / "test")
    atomic_write_text(stamp, fingerprint)
    return train_m, test_m


@dataclass
class ArmResult:
    name: str
    mode: str
    loss: str
    arch: str
    seed: int
    mean_dsc: float
    per_class: dict
    seconds: float
    run_dir: Path


def predict_manifest(cfg: RunConfig, checkpoint, manifest: DatasetManifest, out_dir) -> Path:
    """Predict every labeled image of ``manifest`` into ``out_dir/<case>.raw/.json``."""
    state = load_checkpoint(checkpoint)
    icfg = cfg.inference_config()
    out_dir = Path(out_dir)
    for img_rel, _ in manifest.labeled_cases:
        vol = load_volume(manifest.path(img_rel))
        save_volume(predict_volume(state, vol, icfg), out_dir / DatasetManifest.case_id(img_rel))
    return out_dir


def run_arm(cfg: RunConfig, workdir, name: str) -> ArmResult:
    r = cfg.resolved()
    train_m, test_m = prepare_data(cfg, workdir)
    run_dir = Path(workdir) / "runs" / name
    config_text = r.to_text()
    stamp = run_dir / "DONE"
    eval_csv = run_dir / "eval.csv"
    if stamp.exists() and (run_dir / "resolved_config.txt").read_text() == config_text:
        seconds = float(stamp.read_text().strip() or 0)
        logger.info("reusing finished arm %s", name)
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.write(run_dir / "resolved_config.txt")
        t0 = time.perf_counter()
        train(train_m, r.train_config(), r.network_spec(), run_dir)
        pred_dir = predict_manifest(r, final_checkpoint(run_dir, r["deploy_net"]), test_m,
                                    run_dir / "pred")
        evaluate_dataset(pred_dir, test_m.root / "labels", r["class_names"]).write(eval_csv)
        seconds = time.perf_counter() - t0
        atomic_write_text(stamp, f"{seconds:.1f}\n")
    mean, per_class = read_aggregate(eval_csv)
    return ArmResult(name, r["mode"], r["loss"], r["arch"], r["seed"], mean, per_class, seconds, run_dir)


def read_aggregate(eval_csv) -> tuple[float, dict]:
    lines = [l for l in Path(eval_csv).read_text().splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    agg = dict(zip(header, lines[-1].split(",")))
    if agg.get("case") != "mean":
        raise ValueError(f"{eval_csv} has no aggregate row")
    per_class = {k: float(v) for k, v in agg.items() if k not in ("case", "mean")}
    return float(agg["mean"]), per_class


def _table(rows: Sequence[ArmResult], label: str, first_col) -> str:
    names = list(rows[0].per_class) if rows else []
    lines = [",".join([label, "seed", "mean", *names, "seconds"])]
    for r in rows:
        lines.append(",".join([first_col(r), str(r.seed), f"{r.mean_dsc:.6f}",
                               *[f"{r.per_class[n]:.6f}" for n in names], f"{r.seconds:.1f}"]))
    return "\n".join(lines) + "\n"


@dataclass
class AblationSummary:
    rows: list
    per_seed_gain: dict  # seed -> ssl mean - supervised mean
    median_seed: int
    csv_path: Path

    def arm(self, mode: str, seed: int) -> ArmResult:
        return next(r for r in self.rows if r.mode == mode and r.seed == seed)


def run_ssl_ablation(cfg: RunConfig, workdir, seeds: Sequence[int] = (0, 1, 2)) -> AblationSummary:
    """Supervised-only (no unlabeled stream) vs SSL for each seed, same data and init."""
    rows = []
    for seed in seeds:
        for mode in ("supervised", "ssl"):
            arm_cfg = cfg.copy(seed=seed, mode=mode)
            rows.append(run_arm(arm_cfg, workdir, f"{mode}_{arm_cfg['arch']}_{arm_cfg['loss']}_seed{seed}"))
    gains = {}
    for seed in seeds:
        sup = next(r for r in rows if r.seed == seed and r.mode == "supervised")
        ssl = next(r for r in rows if r.seed == seed and r.mode == "ssl")
        gains[seed] = ssl.mean_dsc - sup.mean_dsc
    median_gain = statistics.median_low(gains.values())
    median_seed = next(s for s, g in gains.items() if g == median_gain)
    path = Path(workdir) / "ablation.csv"
    atomic_write_text(path, _table(rows, "method", lambda r: f"{r.arch} w{'' if r.mode == 'ssl' else '/o'} SSL"))
    return AblationSummary(rows, gains, median_seed, path)


def run_loss_comparison(cfg: RunConfig, workdir, seed: int = 0) -> Path:
    """Dice+CE vs robust loss on the same data and seed; writes a two-row CSV."""
    rows = []
    for loss in ("dice_ce", "rs"):
        arm_cfg = cfg.copy(seed=seed, loss=loss)
        rows.append(run_arm(arm_cfg, workdir, f"{arm_cfg['mode']}_{arm_cfg['arch']}_{loss}_seed{seed}"))
    path = Path(workdir) / "loss_comparison.csv"
    labels = {"dice_ce": "Dice+CE", "rs": "NRD+TCE"}
    atomic_write_text(path, _table(rows, "loss", lambda r: labels[r.loss]))
    return path
