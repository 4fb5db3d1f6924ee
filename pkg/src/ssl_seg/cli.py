"""``ssl-seg`` command-line entry point.

Exit codes: 0 success, 1 failed check (grad-check), 2 configuration error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, read_config_pairs
from .network import ConfigurationError, count_parameters, layer_table

log = logging.getLogger("ssl_seg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
GRAD_CHECK_TOLERANCE = 1e-4

# dedicated flags that map onto config keys
FLAG_KEYS = {
    "mode": "mode", "loss": "loss", "arch": "arch", "tta": "tta", "fusion": "fusion",
    "nsd_tolerance": "nsd_tolerance", "class_names": "class_names",
    "n_labeled": "n_labeled", "n_unlabeled": "n_unlabeled",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--seed", type=str, help="overrides the 'seed' key")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssl-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a phantom dataset and its manifest")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-labeled", dest="n_labeled")
    p.add_argument("--n-unlabeled", dest="n_unlabeled")

    p = sub.add_parser("train", help="dual-network training (ssl or supervised)")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path)
    p.add_argument("--mode", choices=["supervised", "ssl"])
    p.add_argument("--loss", choices=["dice_ce", "rs"])
    p.add_argument("--arch", choices=["separable", "regular"])

    p = sub.add_parser("infer", help="sliding-window prediction over a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="net directory, or a training output (latest checkpoint is used)")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["labeled", "unlabeled", "all"], default="labeled")
    p.add_argument("--tta", choices=["none", "flips3"])
    p.add_argument("--fusion", choices=["full_prob", "label_only"])

    p = sub.add_parser("evaluate", help="per-case DSC (and NSD) table")
    _add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--nsd-tolerance", dest="nsd_tolerance")
    p.add_argument("--class-names", dest="class_names")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    _add_common(p)
    p.add_argument("--fields", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)

    p = sub.add_parser("count-params", help="closed-form parameter count of a network spec")
    _add_common(p)
    p.add_argument("--layers", action="store_true", help="print the per-layer table")

    p = sub.add_parser("ablation", help="supervised vs SSL on phantoms, several seeds")
    _add_common(p)
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--arch", choices=["separable", "regular"])
    p.add_argument("--loss", choices=["dice_ce", "rs"])

    p = sub.add_parser("compare-losses", help="Dice+CE vs robust loss on phantoms")
    _add_common(p)
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--mode", choices=["supervised", "ssl"])
    return parser


def resolve_config(args, base: RunConfig = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    if args.config:
        cfg.update(read_config_pairs(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seed", args.seed)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    from .phantom import generate_dataset

    cfg = resolve_config(args).resolved()
    manifest = generate_dataset(cfg.phantom_config(), cfg["n_labeled"], cfg["n_unlabeled"], args.out)
    cfg.write(args.out / "resolved_config.txt")
    print(f"wrote {manifest.n_labeled} labeled + {manifest.n_unlabeled} unlabeled cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .phantom import DatasetManifest
    from .trainer import train

    cfg = resolve_config(args).resolved()
    manifest = DatasetManifest.load(args.manifest)
    val = DatasetManifest.load(args.val_manifest) if args.val_manifest else None
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.write(args.out / "resolved_config.txt")
    result = train(manifest, cfg.train_config(), cfg.network_spec(), args.out, val_manifest=val,
                   on_epoch=lambda r: log.info("epoch %(epoch)d sup_a %(sup_a).4f cons_a %(cons_a).4f", r))
    print(f"trained {cfg['total_epochs']} epochs in {result.seconds:.1f}s; log at {result.log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .experiments import predict_manifest
    from .network import load_checkpoint
    from .inference import predict_volume
    from .phantom import DatasetManifest
    from .trainer import final_checkpoint
    from .volume import load_volume, save_volume

    cfg = resolve_config(args).resolved()
    ckpt = args.checkpoint
    if not (ckpt / "spec.json").exists():
        ckpt = final_checkpoint(ckpt, cfg["deploy_net"])
    manifest = DatasetManifest.load(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.split == "labeled":
        predict_manifest(cfg, ckpt, manifest, args.out)
        n = manifest.n_labeled
    else:
        state, icfg = load_checkpoint(ckpt), cfg.inference_config()
        rels = [i for i, _ in manifest.labeled_cases] if args.split == "all" else []
        rels += list(manifest.unlabeled_cases)
        for rel in rels:
            vol = load_volume(manifest.path(rel))
            save_volume(predict_volume(state, vol, icfg), args.out / DatasetManifest.case_id(rel))
        n = len(rels)
    cfg.write(args.out / "resolved_config.txt")
    print(f"predicted {n} cases into {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset

    cfg = resolve_config(args).resolved()
    report = evaluate_dataset(args.pred, args.gt, cfg["class_names"], cfg["nsd_tolerance"])
    report.write(args.out)
    agg = report.aggregate()
    if agg:
        print(f"{len(report.cases)} cases, mean DSC {agg['mean']:.4f}")
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_OK


def grad_check_all(cfg: RunConfig, n_fields: int = 20, step: float = 1e-5, seed: int = 0) -> dict:
    """Max relative FD error per loss over ``n_fields`` random 3-class 4^3 fields."""
    from dataclasses import replace

    from .losses import gradient_check, random_prob_field

    base = cfg.loss_config()
    cases = {
        "dice_ce": ("dice_ce", base),
        "nrd_gamma1.5": ("nrd", replace(base, gamma=1.5)),
        "nrd_gamma2": ("nrd", replace(base, gamma=2.0)),
        "tce": ("tce", base),
        "rs": ("rs", base),
    }
    rng = np.random.default_rng(seed)
    fields = [random_prob_field(rng) for _ in range(n_fields)]
    return {name: max(gradient_check(loss_id, mu, ups, step, lcfg) for mu, ups in fields)
            for name, (loss_id, lcfg) in cases.items()}


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args).resolved()
    errors = grad_check_all(cfg, args.fields, args.step, cfg["seed"])
    ok = True
    for name, err in errors.items():
        passed = err < GRAD_CHECK_TOLERANCE
        ok &= passed
        print(f"{name:14s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_count_params(args) -> int:
    spec = resolve_config(args).network_spec()
    if args.layers:
        for row in layer_table(spec):
            print(f"{row.name:24s} {row.kind:8s} {row.c_in:4d} -> {row.c_out:4d} {row.mode:10s} {row.params}")
    print(count_parameters(spec))
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .experiments import run_ssl_ablation, toy_config

    cfg = resolve_config(args, base=toy_config())
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    summary = run_ssl_ablation(cfg, args.workdir, seeds)
    print(Path(summary.csv_path).read_text(), end="")
    for seed, gain in summary.per_seed_gain.items():
        print(f"seed {seed}: SSL - supervised = {gain:+.4f}")
    return EXIT_OK


def cmd_compare_losses(args) -> int:
    from .experiments import run_loss_comparison, toy_config

    cfg = resolve_config(args, base=toy_config())
    path = run_loss_comparison(cfg, args.workdir, cfg["seed"])
    print(path.read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "count-params": cmd_count_params,
    "ablation": cmd_ablation,
    "compare-losses": cmd_compare_losses,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
