"""Command line entry point: generate, train, evaluate, ablate, sweep, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import plotting
from .data import SyntheticConfig, generate_synthetic, load_dataset
from .gradcheck import run_all
from .model import XCapsModel
from .trainer import (TrainConfig, ablation_suite, cross_validate, emit_sweep_images, evaluate, read_pgm)

log = logging.getLogger("xcaps")

MALIGNANCY_MODES = {"distribution": "distribution", "mean": "mean_regression"}


def _add_training_args(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0, required=seed_required)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--folds", type=int, default=5, help="number of cross-validation folds")
    p.add_argument("--max-folds", type=int, default=None, help="stop after this many folds")
    p.add_argument("--conv-filters", type=int, default=256)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--plateau-patience", type=int, default=5)
    p.add_argument("--early-stop", type=int, default=15, help="early stopping patience in epochs")


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, seed=args.seed,
                       k_folds=args.folds, conv_filters=args.conv_filters, dtype=args.dtype,
                       plateau_patience=args.plateau_patience, early_stop_patience=args.early_stop, **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xcaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic nodule dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--raters", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.7)

    p = sub.add_parser("train", help="stratified cross-validated training")
    _add_training_args(p)
    p.add_argument("--routing", choices=("sigmoid", "softmax"), default="sigmoid")
    p.add_argument("--no-reconstruction", action="store_true")
    p.add_argument("--malignancy", choices=tuple(MALIGNANCY_MODES), default="distribution")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--malignancy", choices=tuple(MALIGNANCY_MODES), default="distribution",
                   help="how the checkpoint's head was trained")

    p = sub.add_parser("ablate", help="base configuration against the three ablations")
    _add_training_args(p, seed_required=True)
    p.set_defaults(max_folds=1)

    p = sub.add_parser("sweep", help="capsule dimension perturbation sweeps as PGM grids")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--sample", required=True, help="sample id")
    p.add_argument("--data", required=True, type=Path, help="dataset holding the sample")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(seed=args.seed, count=args.count, rater_count=args.raters, rater_noise=args.noise)
    out = generate_synthetic(cfg, args.out)
    print(f"wrote {cfg.count} samples to {out}")
    return 0


def _plot_runs(runs, out_dir: Path) -> None:
    for run in runs:
        plotting.plot_training_log(run.train.log, out_dir / f"fold{run.fold}_curve.png", f"fold {run.fold}")
        plotting.plot_report(run.report.to_json(), out_dir / f"fold{run.fold}_report.png", f"fold {run.fold}")


def cmd_train(args) -> int:
    cfg = _train_config(args, routing_mode=args.routing, use_reconstruction=not args.no_reconstruction,
                        malignancy_mode=MALIGNANCY_MODES[args.malignancy])
    records = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    runs, aggregate, _ = cross_validate(records, cfg, args.out, args.max_folds)
    _plot_runs(runs, args.out)
    print(json.dumps(aggregate, indent=1, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    model = XCapsModel.load(args.checkpoint)
    cfg = TrainConfig(malignancy_mode=MALIGNANCY_MODES[args.malignancy],
                      routing_mode=model.config.routing.mode, conv_filters=model.config.conv_filters,
                      alpha=(1.0,) * model.config.attr_count)
    records = load_dataset(args.data)
    report = evaluate(model, records, cfg)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    report.write(args.report)
    plotting.plot_report(report.to_json(), args.report.with_suffix(".png"))
    print(f"malignancy {report.malignancy_accuracy:.4f} on {report.n_samples} samples")
    for name, acc in report.attribute_accuracy.items():
        print(f"{name:>4} {acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    records = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = ablation_suite(records, _train_config(args), args.out, args.max_folds)
    plotting.plot_ablation(rows, args.out / "ablation.png")
    for row in rows:
        print(f"{row['config']:<18} {row['malignancy_accuracy']:.4f}  (full-scale {row['reference_full_scale']:.4f})")
    return 0


def cmd_sweep(args) -> int:
    model = XCapsModel.load(args.checkpoint)
    records = {r.id: r for r in load_dataset(args.data, exclude_mean3=False)}
    if args.sample not in records:
        print(f"sample {args.sample!r} not found in {args.data}", file=sys.stderr)
        return 2
    paths = emit_sweep_images(model, records[args.sample], args.out)
    for path in paths:
        plotting.plot_sweep(read_pgm(path) / 255.0, path.with_suffix(".png"), path.stem)
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.trials, args.seed)
    for r in results:
        print(f"{'ok ' if r.passed else 'FAIL'} {r.name:<28} rel_err {r.max_rel_err:.2e} (tol {r.tol:.0e}) "
              f"{r.seconds:.2f}s")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
