"""Command-line interface: train, ablate, eval, export.

Exit codes are a stable contract: 0 success, 2 usage or configuration
problems, 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, parse_config_text
from .data import train_eval_split
from .errors import AgglomerateError, ConfigError, FormatError, NumericError
from .experiment import (parameter_budget, pca_top2, run_ablation,
                         run_experiment)
from .numerics import Tensor
from .segmetrics import dice, hd95, load_pgm
from .student import load_checkpoint
from .trainer import _encode_all

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agglomerate",
                                     description="Multi-teacher feature distillation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run both training phases from a config")
    train.add_argument("--config", required=True, help="experiment config file")
    train.add_argument("--seed", type=int, default=None, help="override the config seed")
    train.add_argument("--output", default=None, help="override the run directory")
    train.add_argument("--force", action="store_true", help="overwrite a completed run")
    train.add_argument("--dry-run", action="store_true",
                       help="validate the config and print parameter counts")

    ablate = sub.add_parser("ablate", help="run an ablation grid")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--axes", required=True,
                        help="comma list from balancing,standardization,teachers,seed")
    ablate.add_argument("--seeds", type=int, default=5, help="number of seeds per row")
    ablate.add_argument("--seed", type=int, default=None, help="base seed for the sweep")
    ablate.add_argument("--output", default=None, help="ablation output directory")
    ablate.add_argument("--force", action="store_true")

    ev = sub.add_parser("eval", help="score pairs of PGM masks")
    ev.add_argument("pred_dir", help="directory of predicted masks")
    ev.add_argument("gt_dir", help="directory of ground-truth masks")
    ev.add_argument("--output", default=None, help="also write the CSV here")

    export = sub.add_parser("export", help="emit plot-ready CSVs from a run directory")
    export.add_argument("run_dir")
    export.add_argument("what", choices=("curves", "alpha", "pca"))
    export.add_argument("--output", default=None, help="destination directory (default <run>/export)")
    return parser


def _apply_overrides(exp: ExperimentConfig, seed, output) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if output is not None:
        changes["output_dir"] = output
    return exp.with_overrides(**changes) if changes else exp


def _cmd_train(args) -> int:
    exp = _apply_overrides(load_config(args.config), args.seed, args.output)
    if args.dry_run:
        counts = parameter_budget(exp)
        print(f"config OK: {len(exp.teachers)} teachers, balancing={exp.balancing}, "
              f"standardization={exp.standardization}, seed={exp.seed}")
        for part in ("student", "heads", "balancer", "decoder", "total"):
            print(f"params.{part} = {counts[part]}")
        return EXIT_OK
    report = run_experiment(exp, force=args.force, echo=True)
    hd = report.final_hd95()
    print(f"done: dice_macro={report.final_dice():.4f} "
          f"hd95_macro={'undef' if hd is None else format(hd, '.3f')} "
          f"report={Path(exp.output_dir) / 'report.csv'}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    exp = _apply_overrides(load_config(args.config), args.seed, None)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    if not axes:
        raise ConfigError("--axes must name at least one axis")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [exp.seed + i for i in range(args.seeds)]
    out_dir = args.output or str(Path(exp.output_dir).parent / "ablation")
    summary = run_ablation(exp, axes, seeds, out_dir, force=args.force, echo=True)
    for row in summary["rows"]:
        hd = "undef" if row["hd95_mean"] is None else f"{row['hd95_mean']:.3f}"
        print(f"{row['label']}: dice={row['dice_mean']:.4f}±{row['dice_std']:.4f} hd95={hd}")
    for key in ("balancing_trend", "teachers_trend"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    print(f"ablation tables written to {out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigError(f"not a directory: {pred_dir if not pred_dir.is_dir() else gt_dir}")
    gt_files = sorted(gt_dir.glob("*.pgm"))
    if not gt_files:
        raise ConfigError(f"no .pgm masks found in {gt_dir}")
    for path in sorted(pred_dir.glob("*.pgm")):
        if not (gt_dir / path.name).exists():
            raise ConfigError(f"missing ground-truth counterpart for {path.name}")
    rows = []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise ConfigError(f"missing prediction counterpart for {gt_path.name}")
        pred, gt = load_pgm(pred_path), load_pgm(gt_path)
        d = dice(pred, gt)
        h = hd95(pred, gt) if pred.any() and gt.any() else None
        rows.append((gt_path.name, d, h))
    defined = [h for _, _, h in rows if h is not None]
    macro_d = float(np.mean([d for _, d, _ in rows]))
    macro_h = float(np.mean(defined)) if defined else None

    def emit(writer):
        writer.writerow(["name", "dice", "hd95"])
        for name, d, h in rows:
            writer.writerow([name, repr(d), "undef" if h is None else repr(h)])
        writer.writerow(["macro", repr(macro_d), "undef" if macro_h is None else repr(macro_h)])

    emit(csv.writer(sys.stdout))
    if args.output:
        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            emit(csv.writer(fh))
    return EXIT_OK


def _export_curves(run: Path, dest: Path) -> None:
    with open(run / "report.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        keep = [i for i, name in enumerate(header)
                if name in ("epoch", "lr", "loss") or name.startswith("loss_")]
        with open(dest / "curves.csv", "w", newline="", encoding="utf-8") as out:
            writer = csv.writer(out)
            writer.writerow([header[i] for i in keep])
            for row in reader:
                if row[0] == "1":  # phase 1 rows only
                    writer.writerow([row[i] for i in keep])


def _export_alpha(run: Path, dest: Path) -> None:
    src = run / "alpha.csv"
    if not src.exists():
        raise ConfigError(f"run directory {run} has no alpha.csv")
    (dest / "alpha.csv").write_bytes(src.read_bytes())


def _export_pca(run: Path, dest: Path) -> None:
    exp = parse_config_text((run / "config.echo").read_text(encoding="utf-8"))
    arrays = load_checkpoint(run / "checkpoints" / "phase1.bin")
    params = {}
    for name, arr in arrays.items():
        if name.startswith(("head.", "balancer.")):
            continue
        params[name] = Tensor(arr)
    _, eval_ds = train_eval_split(exp.train.num_train, exp.train.num_eval, exp.seed)
    emb = _encode_all(eval_ds.images, exp.student, params, exp.train.batch_size)
    n, gh, gw, d = emb.shape
    tokens = emb.reshape(n * gh * gw, d)
    _, comps, proj, error = pca_top2(tokens)
    with open(dest / "pca.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "token", "pc1", "pc2"])
        per = gh * gw
        for i in range(proj.shape[0]):
            writer.writerow([str(int(eval_ds.ids[i // per])), str(i % per),
                             repr(float(proj[i, 0])), repr(float(proj[i, 1]))])
    import json
    with open(dest / "pca_meta.json", "w", encoding="utf-8") as fh:
        json.dump({"reconstruction_error": error,
                   "components": comps.tolist()}, fh, indent=2)
        fh.write("\n")


def _cmd_export(args) -> int:
    run = Path(args.run_dir)
    if not (run / "report.csv").exists():
        raise ConfigError(f"{run} does not look like a completed run directory")
    dest = Path(args.output) if args.output else run / "export"
    dest.mkdir(parents=True, exist_ok=True)
    if args.what == "curves":
        _export_curves(run, dest)
    elif args.what == "alpha":
        _export_alpha(run, dest)
    else:
        _export_pca(run, dest)
    print(f"wrote {dest / (args.what + '.csv')}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"train": _cmd_train, "ablate": _cmd_ablate,
                "eval": _cmd_eval, "export": _cmd_export}
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AgglomerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
