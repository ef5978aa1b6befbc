"""Machine-readable run reports: per-epoch CSV/JSON plus the weight stream.

report.csv is the determinism surface — repeated (config, seed) runs must
produce byte-identical files — so wall-clock time lives only in report.json.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

from .errors import ContractError

UNDEFINED = "undef"


def _fmt(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, str):
        return value
    return repr(float(value))


@dataclass
class RunReport:
    teacher_names: list[str]
    class_ids: list[int]
    seed: int = 0
    rows: list[dict] = field(default_factory=list)
    weight_steps: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def add_phase1_epoch(self, epoch: int, lr: float, combined: float,
                         losses: dict[str, float], weights: dict[str, float]) -> None:
        self.rows.append({"phase": 1, "epoch": epoch, "lr": lr, "loss": combined,
                          "teacher_losses": dict(losses), "teacher_weights": dict(weights),
                          "dice": None, "hd95": None,
                          "dice_macro": None, "hd95_macro": None})

    def add_phase2_epoch(self, epoch: int, lr: float, loss: float,
                         dice: dict[int, float], hd95: dict[int, float | None],
                         macro_dice: float, macro_hd95: float | None) -> None:
        self.rows.append({"phase": 2, "epoch": epoch, "lr": lr, "loss": loss,
                          "teacher_losses": None, "teacher_weights": None,
                          "dice": dict(dice), "hd95": dict(hd95),
                          "dice_macro": macro_dice, "hd95_macro": macro_hd95})

    def add_weight_step(self, step: int, weights: dict[str, float]) -> None:
        self.weight_steps.append({"step": step, **{n: float(weights[n]) for n in self.teacher_names}})

    # -- accessors ---------------------------------------------------------

    def phase_rows(self, phase: int) -> list[dict]:
        return [r for r in self.rows if r["phase"] == phase]

    def final_teacher_losses(self) -> dict[str, float]:
        rows = self.phase_rows(1)
        return dict(rows[-1]["teacher_losses"]) if rows else {}

    def first_teacher_losses(self) -> dict[str, float]:
        rows = self.phase_rows(1)
        return dict(rows[0]["teacher_losses"]) if rows else {}

    def final_dice(self) -> float | None:
        rows = self.phase_rows(2)
        return rows[-1]["dice_macro"] if rows else None

    def final_hd95(self) -> float | None:
        rows = self.phase_rows(2)
        return rows[-1]["hd95_macro"] if rows else None

    # -- serialization -----------------------------------------------------

    def csv_header(self) -> list[str]:
        cols = ["phase", "epoch", "lr", "loss"]
        cols += [f"loss_{n}" for n in self.teacher_names]
        cols += [f"weight_{n}" for n in self.teacher_names]
        cols += ["dice_macro", "hd95_macro"]
        cols += [f"dice_c{c}" for c in self.class_ids]
        cols += [f"hd95_c{c}" for c in self.class_ids]
        return cols

    def _check_order(self) -> None:
        keys = [(r["phase"], r["epoch"]) for r in self.rows]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise ContractError("report rows must be strictly ordered by (phase, epoch)")

    def write_csv(self, path) -> None:
        self._check_order()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for r in self.rows:
                row = [str(r["phase"]), str(r["epoch"]), _fmt(r["lr"]), _fmt(r["loss"])]
                for n in self.teacher_names:
                    row.append(_fmt(r["teacher_losses"][n]) if r["teacher_losses"] else "")
                for n in self.teacher_names:
                    row.append(_fmt(r["teacher_weights"][n]) if r["teacher_weights"] else "")
                row.append(_fmt(r["dice_macro"]) if r["dice_macro"] is not None else "")
                row.append(_fmt(r["hd95_macro"]) if r["phase"] == 2 else "")
                for c in self.class_ids:
                    row.append(_fmt(r["dice"][c]) if r["dice"] else "")
                for c in self.class_ids:
                    row.append(_fmt(r["hd95"][c]) if r["hd95"] else "")
                writer.writerow(row)

    def write_weights_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + [f"weight_{n}" for n in self.teacher_names])
            for entry in self.weight_steps:
                writer.writerow([str(entry["step"])] + [_fmt(entry[n]) for n in self.teacher_names])

    def write_json(self, path) -> None:
        self._check_order()
        doc = {
            "seed": self.seed,
            "teachers": self.teacher_names,
            "classes": self.class_ids,
            "wall_clock_seconds": self.wall_clock,
            "final": {
                "dice_macro": self.final_dice(),
                "hd95_macro": self.final_hd95(),
                "teacher_losses": self.final_teacher_losses(),
            },
            "rows": self.rows,
        }
        doc.update(self.extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, default=float)
            fh.write("\n")
