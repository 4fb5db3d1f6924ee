"""Acceptance criteria 1-11, one printed PASS/FAIL line each.

Criteria 8 and 9 train the desk-scale phantom experiments (tens of minutes on
one CPU core). Set ``SSL_SEG_ABLATION_DIR`` to keep their arms between runs;
an arm is reused only when its resolved config is unchanged.
"""

import os
import time

import numpy as np
import pytest
import torch

from ssl_seg.cli import EXIT_OK, grad_check_all, main
from ssl_seg.config import RunConfig
from ssl_seg.cutmix import CutMixMask, make_cutmix_mask, mix
from ssl_seg.experiments import read_aggregate, run_loss_comparison, run_ssl_ablation, toy_config
from ssl_seg.inference import InferenceConfig, predict_labels_array, tile_positions
from ssl_seg.losses import LossConfig, nrd_loss, random_prob_field, soft_dice_loss, tce_loss
from ssl_seg.metrics import dsc, nsd
from ssl_seg.network import NetworkSpec, build_network, conv_parameter_count, layer_table
from ssl_seg.phantom import PhantomConfig, generate_case
from ssl_seg.trainer import TrainConfig, lr_schedule


def test_criterion_01_gradient_checks(criterion):
    t0 = time.perf_counter()
    errors = grad_check_all(RunConfig(), n_fields=20, step=1e-5, seed=0)
    seconds = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    criterion(1, worst < 1e-4 and seconds < 60, f"max rel err {worst:.2e} < 1e-4 in {seconds:.1f}s ({detail})")


def test_criterion_02_nrd_soft_dice_identity(criterion):
    rng = np.random.default_rng(2)
    eps = 1e-5
    cfg = LossConfig(gamma=2.0, epsilon=eps)
    worst = 0.0
    for _ in range(100):
        mu, ups = random_prob_field(rng)
        classes = [c for c in range(1, mu.shape[0]) if float(ups[c].sum()) > 0]
        correction = np.mean([eps / float((mu[c] ** 2).sum() + (ups[c] ** 2).sum() + eps) for c in classes])
        value = float(nrd_loss(mu, ups, cfg)) - float(soft_dice_loss(mu, ups, cfg)) + correction
        worst = max(worst, abs(value))
    criterion(2, worst < 1e-9, f"max |nrd - (1 - soft_dice) + eps/den| = {worst:.1e} < 1e-9 over 100 fields")


def test_criterion_03_tce_ce_bound(criterion):
    xs = np.linspace(0.5, 1.0, 1000)
    ok, worst_excess = True, -np.inf
    for x in xs:
        mu = torch.tensor([1 - x, x], dtype=torch.float64).view(2, 1, 1, 1)
        ups = torch.tensor([0.0, 1.0], dtype=torch.float64).view(2, 1, 1, 1)
        gap = -np.log(x) - float(tce_loss(mu, ups))
        bound = (1 - x) ** 3 / (3 * x)
        ok &= 0.0 <= gap <= bound
        worst_excess = max(worst_excess, gap - bound)
    criterion(3, bool(ok), f"0 <= -ln x - TCE(x) <= (1-x)^3/(3x) on 1000 points; max(gap - bound) = {worst_excess:.1e}")


def test_criterion_04_cutmix_identities(criterion):
    rng = np.random.default_rng(4)
    a = rng.normal(size=(8, 8, 8))
    same = all(np.array_equal(mix(a, a, make_cutmix_mask((8, 8, 8), (0.25, 0.75), rng)), a) for _ in range(50))
    fr = np.array([make_cutmix_mask((32, 32, 32), (0.25, 0.75), rng).fraction for _ in range(1000)])
    bounds = fr.min() >= 0.20 and fr.max() <= 0.80 and abs(fr.mean() - 0.5) <= 0.05
    exact = True
    for _ in range(50):
        u, v = rng.normal(size=(8, 8, 8)), rng.normal(size=(8, 8, 8))
        m = make_cutmix_mask((8, 8, 8), (0.25, 0.75), rng)
        h = m.mask.astype(np.float64)
        exact &= np.array_equal(mix(u, v, m), h * u + (1 - h) * v)
        exact &= np.array_equal(mix(u, v, CutMixMask.full((8, 8, 8))), u)
    ok = same and bounds and bool(exact)
    criterion(4, ok, f"mix(a,a,m)=a {same}; fractions in [{fr.min():.3f}, {fr.max():.3f}] mean {fr.mean():.3f}; "
                     f"H*a+(1-H)*b exact {bool(exact)}")


def test_criterion_05_fusion_oracle(criterion):
    spec = NetworkSpec()
    state = build_network(spec, 5)
    pc = PhantomConfig(shape=(64, 64, 64), seed=77, noise_sigma=0.6)
    base = dict(patch_size=(16, 16, 16), overlap=0.0, weighting="uniform", target_spacing=None)
    identical = 0
    for case in range(10):
        image, _ = generate_case(pc, case)
        full = predict_labels_array(state, image.voxels, 4, InferenceConfig(**base))
        lean = predict_labels_array(state, image.voxels, 4, InferenceConfig(**base, accumulation="label_only"))
        identical += int(np.array_equal(full, lean))
    rng = np.random.default_rng(5)
    covered = 0
    for _ in range(20):
        shape = tuple(int(n) for n in rng.integers(1, 50, size=3))
        patch = tuple(int(min(p, n)) for p, n in zip(rng.integers(1, 20, size=3), shape))
        cover = np.zeros(shape, dtype=bool)
        for t in tile_positions(shape, patch, float(rng.uniform(0, 0.9))):
            cover[t.slices()] = True
        covered += int(cover.all())
    criterion(5, identical == 10 and covered == 20,
              f"label_only == full_prob on {identical}/10 phantoms; full coverage {covered}/20")


def test_criterion_06_parameter_reduction(criterion):
    sep, reg = layer_table(NetworkSpec()), layer_table(NetworkSpec(conv_mode="regular"))
    ratios = [a.params / b.params for a, b in zip(sep, reg)
              if a.kind == "conv" and a.c_in >= 32 and a.c_out >= 32]
    examples = (conv_parameter_count(32, 32, 3, "separable") == 1952
                and conv_parameter_count(32, 32, 3, "regular") == 27680)
    ok = bool(ratios) and max(ratios) < 0.25 and examples
    criterion(6, ok, f"{len(ratios)} layers with C_in, C_out >= 32, max ratio {max(ratios):.4f} < 0.25; "
                     f"1952/27680 examples exact: {examples}")


def test_criterion_07_lr_schedule(criterion):
    got = [lr_schedule(e, TrainConfig()) for e in (0, 199, 200, 399, 400, 450)]
    want = [0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025]
    criterion(7, got == want, f"lr at epochs 0,199,200,399,400,450 = {got}")


# ---------------------------------------------------------------- experiments


@pytest.fixture(scope="session")
def experiment_dir(tmp_path_factory):
    path = os.environ.get("SSL_SEG_ABLATION_DIR")
    return path if path else tmp_path_factory.mktemp("ablation")


def test_criterion_08_ssl_ablation(criterion, experiment_dir):
    summary = run_ssl_ablation(toy_config(), experiment_dir, seeds=(0, 1, 2))
    seed = summary.median_seed
    sup, ssl = summary.arm("supervised", seed), summary.arm("ssl", seed)
    gain = ssl.mean_dsc - sup.mean_dsc
    minutes = sum(r.seconds for r in summary.rows) / 60
    per_seed = "; ".join(
        f"seed {s}: sup {summary.arm('supervised', s).mean_dsc:.4f} ssl {summary.arm('ssl', s).mean_dsc:.4f}"
        for s in (0, 1, 2))
    ok = gain >= 0.01 and sup.mean_dsc >= 0.70 and ssl.mean_dsc >= 0.70 and minutes <= 60
    criterion(8, ok, f"median seed {seed}: gain {gain:+.4f} (>= 0.01), sup {sup.mean_dsc:.4f} ssl {ssl.mean_dsc:.4f} "
                     f"(>= 0.70), {minutes:.1f} min (<= 60) [{per_seed}]")


def test_criterion_09_loss_comparison(criterion, experiment_dir):
    cfg = toy_config(mode="supervised")
    path = run_loss_comparison(cfg, experiment_dir, seed=0)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    ok = (header[:3] == ["loss", "seed", "mean"] and len(rows) == 2
          and [r["loss"] for r in rows] == ["Dice+CE", "NRD+TCE"]
          and all(0.0 <= float(r["mean"]) <= 1.0 for r in rows))
    criterion(9, ok, "two-row CSV " + " | ".join(f"{r['loss']} {float(r['mean']):.4f}" for r in rows))


# ---------------------------------------------------------------- metrics and determinism


def test_criterion_10_metric_examples(criterion):
    checks = {}
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    a[0, 0, :] = 1
    b = np.zeros_like(a)
    b[3, 3, :] = 1
    c = np.zeros_like(a)
    c[0, 0, :2] = 1
    c[1, 1, :2] = 1
    z = np.zeros_like(a)
    checks["dsc identity 1.0"] = dsc(a, a, 1) == 1.0
    checks["dsc disjoint 0.0"] = dsc(a, b, 1) == 0.0
    checks["dsc |P|=|G|=4, overlap 2 -> 0.5"] = dsc(a, c, 1) == 0.5
    checks["dsc both empty 1.0, one empty 0.0"] = dsc(z, z, 1) == 1.0 and dsc(a, z, 1) == 0.0
    cube = np.zeros((14, 14, 14), dtype=np.uint8)
    cube[3:11, 3:11, 3:11] = 1
    shifted = np.zeros_like(cube)
    shifted[4:12, 3:11, 3:11] = 1
    checks["nsd identity 1.0"] = nsd(cube, cube, 1, 0.0, method="brute") == 1.0
    checks["nsd shifted cube, tol 1mm -> 1.0"] = nsd(cube, shifted, 1, 1.0, method="brute") == 1.0
    checks["nsd shifted cube, tol 0mm < 1.0"] = nsd(cube, shifted, 1, 0.0, method="brute") < 1.0
    checks["nsd both empty 1.0, one empty 0.0"] = nsd(z, z, 1, 1.0) == 1.0 and nsd(a, z, 1, 1.0) == 0.0
    failed = [k for k, v in checks.items() if not v]
    criterion(10, not failed, f"{len(checks) - len(failed)}/{len(checks)} metric examples exact"
                              + (f"; failed: {failed}" if failed else ""))


PIPELINE_CONFIG = """\
shape = 16,16,16
spacing = 1,1,1
num_classes = 3
min_voxels_per_class = 10
noise_sigma = 0.2
n_labeled = 2
n_unlabeled = 2
num_stages = 2
base_channels = 4
max_channels = 8
patch_size = 8,8,8
total_epochs = 2
iterations_per_epoch = 3
crop_warmup_epochs = 1
crop_refresh_epochs = 1
checkpoint_every = 1
target_spacing = none
deterministic = true
"""


def test_criterion_11_determinism(criterion, tmp_path):
    cfg = tmp_path / "config.txt"
    cfg.write_text(PIPELINE_CONFIG)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    stages = {"train": [], "infer": [], "evaluate": []}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(cfg), "--manifest", str(data), "--out", str(out / "train")]) == EXIT_OK
        assert main(["infer", "--config", str(cfg), "--checkpoint", str(out / "train"), "--manifest", str(data),
                     "--out", str(out / "pred")]) == EXIT_OK
        assert main(["evaluate", "--config", str(cfg), "--pred", str(out / "pred"), "--gt", str(data / "labels"),
                     "--out", str(out / "eval" / "table.csv"), "--nsd-tolerance", "1"]) == EXIT_OK
        for stage, sub in (("train", "train"), ("infer", "pred"), ("evaluate", "eval")):
            root = out / sub
            stages[stage].append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    same = {stage: runs[0] == runs[1] and len(runs[0]) > 0 for stage, runs in stages.items()}
    counts = ", ".join(f"{s} {len(r[0])} files {'identical' if same[s] else 'DIFFER'}" for s, r in stages.items())
    criterion(11, all(same.values()), counts)
    assert read_aggregate(tmp_path / "a" / "eval" / "table.csv")[0] >= 0.0
