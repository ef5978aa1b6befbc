"""Experiment orchestration: full runs, run directories, and ablation grids.

A run is a pure function of (config, seed): synthetic data, teacher features,
standardizer fits, parameter initialization, and both training phases all
derive their randomness from the experiment seed, so repeated runs emit
byte-identical report.csv files. Ablations execute independent runs (possibly
in parallel worker processes, capped by AGGLOMERATE_THREADS) and aggregate
mean/std summaries shaped like the balancing and teacher-selection tables.
"""

from __future__ import annotations

import dataclasses
import itertools
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .balancing import init_attn_balancer, init_mlp_balancer
from .config import ExperimentConfig
from .data import train_eval_split
from .errors import ConfigError, ContractError
from .features import PatchGrid, resample_grid, synth_teacher
from .numerics import Tensor
from .report import RunReport
from .standardize import (apply_standardizer, fit_standardizer,
                          next_power_of_two, save_standardizer)
from .student import (init_projection_head, init_student, parameter_checksum,
                      parameter_count, save_checkpoint)
from .trainer import (DistillationSystem, TeacherBundle, align_phase,
                      distill_phase, init_decoder)

BALANCING_GRID = [("uniform", "l2"), ("mlp", "l2"), ("mlp", "phi-s"),
                  ("attention", "l2"), ("attention", "phi-s")]
TEACHER_SUBSETS = [(0,), (0, 1), (0, 1, 2), (0, 2), (1, 2)]
TREND_SLACK = 0.005  # half a Dice point on the [0, 1] scale


def standardized_channels(exp: ExperimentConfig, teacher_channels: int) -> int:
    if exp.standardization == "phi-s":
        return next_power_of_two(teacher_channels)
    return teacher_channels


def build_system(exp: ExperimentConfig):
    """Instantiate student, heads, balancer, and decoder from a config."""
    student_params = init_student(
        exp.student, np.random.default_rng(np.random.SeedSequence([exp.seed, 7])))
    heads = []
    for i, entry in enumerate(exp.teachers):
        rng = np.random.default_rng(np.random.SeedSequence([exp.seed, 11, i]))
        heads.append(init_projection_head(entry.name, exp.student.embed_dim,
                                          standardized_channels(exp, entry.spec.out_channels), rng))
    mlp_bal = attn_bal = None
    brng = np.random.default_rng(np.random.SeedSequence([exp.seed, 13]))
    if exp.balancing == "mlp":
        mlp_bal = init_mlp_balancer(len(exp.teachers), hidden=exp.balancer_hidden,
                                    activation=exp.balancer_activation, rng=brng)
    elif exp.balancing == "attention":
        channels = [standardized_channels(exp, t.spec.out_channels) for t in exp.teachers]
        attn_bal = init_attn_balancer(exp.student.embed_dim, channels,
                                      width=exp.attn_width, rng=brng)
    system = DistillationSystem(
        student_cfg=exp.student, student_params=student_params, heads=heads,
        balancing=exp.balancing, mlp_balancer=mlp_bal, attn_balancer=attn_bal,
        entropy_coeff=exp.entropy_coeff)
    decoder = init_decoder(exp.student.embed_dim, exp.train.num_classes,
                           np.random.default_rng(np.random.SeedSequence([exp.seed, 17])))
    return system, decoder


def parameter_budget(exp: ExperimentConfig) -> dict[str, int]:
    system, decoder = build_system(exp)
    counts = {
        "student": parameter_count(system.student_params),
        "heads": sum(parameter_count(h.params()) for h in system.heads),
        "decoder": parameter_count(decoder.params()),
    }
    balancer = dict(system.trainable())
    for k in list(balancer):
        if not k.startswith("balancer."):
            del balancer[k]
    counts["balancer"] = parameter_count(balancer)
    counts["total"] = sum(counts.values())
    return counts


def prepare_targets(exp: ExperimentConfig, images: np.ndarray):
    """Teacher features on the student grid, standardized; plus fitted states."""
    bundle = TeacherBundle(adapters=[synth_teacher(t.spec, t.name) for t in exp.teachers])
    gh, gw = exp.student.grid
    targets: dict[str, np.ndarray] = {}
    for adapter in bundle.adapters:
        grid = resample_grid(adapter.produce(images), gh, gw)
        state = fit_standardizer(exp.standardization, grid)
        bundle.standardizers[adapter.name] = state
        targets[adapter.name] = apply_standardizer(grid, state).data.data
    return bundle, targets


def run_experiment(exp: ExperimentConfig, force: bool = False, echo: bool = False) -> RunReport:
    out = Path(exp.output_dir)
    if (out / "report.json").exists():
        if not force:
            raise ConfigError(f"run directory {out} already holds a completed run; "
                              "pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "standardizers").mkdir(exist_ok=True)
    (out / "config.echo").write_text(exp.source_text, encoding="utf-8")

    log_fh = open(out / "train.log", "w", encoding="utf-8")

    def log(msg: str) -> None:
        log_fh.write(msg + "\n")
        if echo:
            print(msg)

    started = time.perf_counter()
    try:
        cfg = exp.train
        train_ds, eval_ds = train_eval_split(cfg.num_train, cfg.num_eval, exp.seed)
        if set(train_ds.ids) & set(eval_ds.ids):
            raise ContractError("train/eval sample ids overlap")
        bundle, targets = prepare_targets(exp, train_ds.images)
        for name, state in bundle.standardizers.items():
            save_standardizer(state, out / "standardizers" / f"{name}.txt")
        system, decoder = build_system(exp)
        report = RunReport(teacher_names=bundle.names,
                           class_ids=list(range(1, cfg.num_classes)), seed=exp.seed)
        log(f"run seed={exp.seed} teachers={bundle.names} balancing={exp.balancing} "
            f"standardization={exp.standardization}")
        distill_phase(system, train_ds.images, targets, exp.loss_kinds(),
                      bundle.names, cfg, report, log)
        save_checkpoint(system.trainable(), out / "checkpoints" / "phase1.bin")

        frozen = parameter_checksum(system.student_params)
        align_phase(exp.student, system.student_params, decoder,
                    train_ds.images, train_ds.masks, eval_ds.images, eval_ds.masks,
                    cfg, report, hd95_mode=exp.hd95_mode, log=log)
        if parameter_checksum(system.student_params) != frozen:
            raise ContractError("student parameters changed during phase 2")
        save_checkpoint(decoder.params(), out / "checkpoints" / "phase2.bin")

        report.wall_clock = time.perf_counter() - started
        report.write_csv(out / "report.csv")
        report.write_weights_csv(out / "alpha.csv")
        report.write_json(out / "report.json")
        hd = report.final_hd95()
        log(f"final dice={report.final_dice():.4f} hd95="
            f"{'undef' if hd is None else format(hd, '.3f')}")
        return report
    finally:
        log_fh.close()


# ---------------------------------------------------------------------------
# ablation grid


def expand_axes(exp: ExperimentConfig, axes: list[str]) -> list[tuple[str, dict]]:
    """Rows of (label, override kwargs) for the requested ablation axes."""
    known = {"balancing", "standardization", "teachers", "seed"}
    for axis in axes:
        if axis not in known:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(known)}")
    active = [a for a in axes if a != "seed"]
    if not active:
        return [(f"{exp.balancing}+{exp.standardization}", {})]
    if set(active) == {"balancing", "standardization"}:
        return [(f"{bal}+{std}", {"balancing": bal, "standardization": std})
                for bal, std in BALANCING_GRID]
    per_axis: list[list[tuple[str, dict]]] = []
    for axis in active:
        if axis == "balancing":
            per_axis.append([(b, {"balancing": b}) for b in ("uniform", "mlp", "attention")])
        elif axis == "standardization":
            per_axis.append([(s, {"standardization": s}) for s in ("l2", "phi-s")])
        elif axis == "teachers":
            if len(exp.teachers) != 3:
                raise ConfigError("the teachers axis expects exactly 3 configured teachers")
            options = []
            for subset in TEACHER_SUBSETS:
                chosen = [exp.teachers[i] for i in subset]
                options.append(("+".join(t.name for t in chosen), {"teachers": chosen}))
            per_axis.append(options)
    rows = []
    for combo in itertools.product(*per_axis):
        label = "+".join(part for part, _ in combo)
        overrides: dict = {}
        for _, kw in combo:
            overrides.update(kw)
        rows.append((label, overrides))
    return rows


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_+" else "_" for c in label)


def _run_one(exp: ExperimentConfig) -> dict:
    report = run_experiment(exp, force=True, echo=False)
    final_losses = report.final_teacher_losses()
    return {
        "dice": report.final_dice(),
        "hd95": report.final_hd95(),
        "fidelity_mse": float(np.mean(list(final_losses.values()))) if final_losses else None,
    }


def _worker_count(jobs: int) -> int:
    cap = os.environ.get("AGGLOMERATE_THREADS")
    limit = int(cap) if cap else 1
    return max(1, min(jobs, limit, os.cpu_count() or 1))


def run_ablation(exp: ExperimentConfig, axes: list[str], seeds: list[int],
                 out_dir, force: bool = False, echo: bool = False) -> dict:
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(out_dir)
    if (out / "ablation.json").exists() and not force:
        raise ConfigError(f"ablation directory {out} already holds results; "
                          "pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    rows = expand_axes(exp, axes)
    jobs = []
    for label, overrides in rows:
        for seed in seeds:
            run_dir = out / "runs" / _safe_name(label) / f"seed{seed}"
            jobs.append(exp.with_overrides(seed=seed, output_dir=str(run_dir), **overrides))
    workers = _worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            if echo:
                print(f"[ablate] {job.output_dir}")
            results.append(_run_one(job))

    summary_rows = []
    idx = 0
    for label, overrides in rows:
        dices, hds, fids = [], [], []
        for _ in seeds:
            res = results[idx]
            idx += 1
            dices.append(res["dice"])
            if res["hd95"] is not None:
                hds.append(res["hd95"])
            if res["fidelity_mse"] is not None:
                fids.append(res["fidelity_mse"])
        summary_rows.append({
            "label": label,
            "overrides": {k: v for k, v in overrides.items() if k != "teachers"},
            "seeds": len(seeds),
            "dice_mean": float(np.mean(dices)),
            "dice_std": float(np.std(dices, ddof=1)) if len(dices) > 1 else 0.0,
            "hd95_mean": float(np.mean(hds)) if hds else None,
            "hd95_std": float(np.std(hds, ddof=1)) if len(hds) > 1 else 0.0,
            "fidelity_mean": float(np.mean(fids)) if fids else None,
        })

    summary = {"axes": axes, "seeds": seeds, "rows": summary_rows}
    summary.update(_trend_flags(exp, summary_rows))
    _write_ablation_outputs(out, summary)
    return summary


def _mean_of(rows: list[dict], label: str) -> float | None:
    for row in rows:
        if row["label"] == label:
            return row["dice_mean"]
    return None


def _trend_flags(exp: ExperimentConfig, rows: list[dict]) -> dict:
    flags: dict = {}
    uniform = _mean_of(rows, "uniform+l2")
    mlp = _mean_of(rows, "mlp+l2")
    attn = _mean_of(rows, "attention+phi-s")
    if None not in (uniform, mlp, attn):
        ok = (attn >= mlp - TREND_SLACK) and (mlp >= uniform - TREND_SLACK)
        flags["balancing_trend_ok"] = ok
        flags["balancing_trend"] = (f"attention+phi-s={attn:.4f} mlp+l2={mlp:.4f} "
                                    f"uniform+l2={uniform:.4f}"
                                    + ("" if ok else "  [ORDERING VIOLATED]"))
    if len(exp.teachers) == 3:
        single = _mean_of(rows, exp.teachers[0].name)
        full = _mean_of(rows, "+".join(t.name for t in exp.teachers))
        if None not in (single, full):
            ok = full >= single - TREND_SLACK
            flags["teachers_trend_ok"] = ok
            flags["teachers_trend"] = (f"all-teachers={full:.4f} single={single:.4f}"
                                       + ("" if ok else "  [ORDERING VIOLATED]"))
    return flags


def _write_ablation_outputs(out: Path, summary: dict) -> None:
    import csv
    import json

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "seeds", "dice_mean", "dice_std",
                         "hd95_mean", "hd95_std", "fidelity_mean"])
        for row in summary["rows"]:
            writer.writerow([
                row["label"], str(row["seeds"]),
                repr(row["dice_mean"]), repr(row["dice_std"]),
                "undef" if row["hd95_mean"] is None else repr(row["hd95_mean"]),
                repr(row["hd95_std"]),
                "undef" if row["fidelity_mean"] is None else repr(row["fidelity_mean"]),
            ])
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, default=float)
        fh.write("\n")
    with open(out / "ablation.md", "w", encoding="utf-8") as fh:
        fh.write(_markdown_table(summary))


def _markdown_table(summary: dict) -> str:
    lines = ["| Row | Config | avg. Dice ↑ | avg. HD95 ↓ | fidelity MSE ↓ |",
             "|-----|--------|-------------|-------------|----------------|"]
    for i, row in enumerate(summary["rows"], start=1):
        hd = "undef" if row["hd95_mean"] is None else f"{row['hd95_mean']:.3f} ± {row['hd95_std']:.3f}"
        fid = "undef" if row["fidelity_mean"] is None else f"{row['fidelity_mean']:.5f}"
        lines.append(f"| {i} | {row['label']} | {row['dice_mean']:.4f} ± {row['dice_std']:.4f} "
                     f"| {hd} | {fid} |")
    for key in ("balancing_trend", "teachers_trend"):
        if key in summary:
            lines.append("")
            lines.append(f"*{key.replace('_', ' ')}: {summary[key]}*")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# analysis helpers for exports


def pca_top2(tokens: np.ndarray, iterations: int = 500):
    """Top-2 principal directions by deflated power iteration.

    Returns (mean, components [2, D], projections [N, 2], reconstruction_error).
    Deterministic: fixed initialization, fixed iteration count.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("pca_top2 expects [samples >= 2, channels]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    comps = []
    deflated = cov.copy()
    d = cov.shape[0]
    for k in range(2):
        v = np.ones(d) / np.sqrt(d)
        v[k % d] += 0.5  # break symmetry deterministically
        v /= np.linalg.norm(v)
        for _ in range(iterations):
            v = deflated @ v
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        eig = float(v @ cov @ v)
        deflated = deflated - eig * np.outer(v, v)
    comps = np.stack(comps)
    proj = centered @ comps.T
    recon = proj @ comps
    error = float(((centered - recon) ** 2).mean())
    return mean, comps, proj, error
