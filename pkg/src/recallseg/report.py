"""Per-step evaluation records and their CSV / JSON renderings.

Group convention: background counts towards ``miou_all`` only; ``miou_old``
covers the foreground classes of the initial step and ``miou_new`` the
incremental classes learned so far.  Undefined IoUs are left out of means.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import BACKGROUND, ClassSet, Dataset
from .metrics import ConfusionMatrix, accumulate, iou, mean_defined, merge, pixel_accuracy

CSV_HEAD = ("step", "setup", "method", "miou_old", "miou_new", "miou_all", "pa_new", "mem_bytes", "wall_ms")
CONVENTION = (
    "miou_all includes background; miou_old and miou_new exclude it; "
    "undefined IoUs (no gt and no predicted pixels) are excluded from means"
)


@dataclass
class StepReport:
    step: int
    coverage: tuple[int, ...]
    per_class_iou: dict[int, float | None]
    per_class_pa: dict[int, float | None]
    miou_old: float | None
    miou_new: float | None
    miou_all: float | None
    pa_new: float | None
    mem_bytes: int
    ledger: dict = field(default_factory=dict)
    wall_ms: float | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "coverage": list(self.coverage),
            "miou_old": self.miou_old,
            "miou_new": self.miou_new,
            "miou_all": self.miou_all,
            "pa_new": self.pa_new,
            "mem_bytes": self.mem_bytes,
            "wall_ms": self.wall_ms,
            "per_class_iou": {str(c): v for c, v in sorted(self.per_class_iou.items())},
            "per_class_pa": {str(c): v for c, v in sorted(self.per_class_pa.items())},
            "ledger": self.ledger,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepReport":
        return cls(
            step=d["step"],
            coverage=tuple(d["coverage"]),
            per_class_iou={int(k): v for k, v in d["per_class_iou"].items()},
            per_class_pa={int(k): v for k, v in d["per_class_pa"].items()},
            miou_old=d["miou_old"],
            miou_new=d["miou_new"],
            miou_all=d["miou_all"],
            pa_new=d["pa_new"],
            mem_bytes=d["mem_bytes"],
            ledger=d.get("ledger", {}),
            wall_ms=d.get("wall_ms"),
        )


@dataclass
class ExperimentReport:
    method: str
    setup: str
    schedule: str
    seed: int
    num_classes: int
    config: dict
    steps: list[StepReport] = field(default_factory=list)
    status: str = "complete"
    error: str | None = None

    @property
    def final(self) -> StepReport:
        return self.steps[-1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "setup": self.setup,
            "schedule": self.schedule,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "status": self.status,
            "error": self.error,
            "convention": CONVENTION,
            "config": self.config,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            method=d["method"],
            setup=d["setup"],
            schedule=d["schedule"],
            seed=d["seed"],
            num_classes=d["num_classes"],
            config=d["config"],
            steps=[StepReport.from_dict(s) for s in d["steps"]],
            status=d.get("status", "complete"),
            error=d.get("error"),
        )


# --------------------------------------------------------------------------
# evaluation


def step_metrics(
    cm: ConfusionMatrix,
    coverage: ClassSet,
    initial: ClassSet,
    current: ClassSet,
) -> dict:
    """Grouped metrics of one step from a single confusion matrix."""
    fg = coverage.foreground()
    old = fg & initial
    new = fg - initial
    per_iou = {c: iou(cm, c) for c in coverage}
    per_pa = {c: pixel_accuracy(cm, c) for c in coverage}
    return {
        "per_class_iou": per_iou,
        "per_class_pa": per_pa,
        "miou_old": mean_defined(per_iou[c] for c in old),
        "miou_new": mean_defined(per_iou[c] for c in new) if new else None,
        "miou_all": mean_defined(per_iou.values()),
        "pa_new": mean_defined(per_pa[c] for c in current.foreground()),
    }


def _shards(n: int, k: int) -> list[range]:
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(k) if bounds[i] < bounds[i + 1]]


def confusion_over(
    test: Dataset,
    coverage: ClassSet,
    predict_fn: Callable[[int], np.ndarray],
    n_classes: int,
    workers: int = 1,
) -> ConfusionMatrix:
    """Confusion matrix over the test set, ground truth masked to ``coverage``.

    Classes not learned yet count as background.  ``predict_fn(i)`` returns
    the label map of test sample ``i``.  Shards are merged in shard order;
    integer addition makes the result independent of the worker count.
    """
    keep = np.zeros(256, dtype=bool)
    keep[coverage.to_array()] = True

    def run(idx: range) -> ConfusionMatrix:
        cm = ConfusionMatrix.empty(n_classes)
        for i in idx:
            gt = test[i].labels.labels
            gt = np.where(keep[gt], gt, BACKGROUND)
            cm = accumulate(cm, gt, predict_fn(i))
        return cm

    shards = _shards(len(test), max(1, workers))
    if workers <= 1 or len(shards) <= 1:
        return merge(run(s) for s in shards)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return merge(list(pool.map(run, shards)))


# --------------------------------------------------------------------------
# rendering


def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def csv_columns(num_classes: int) -> list[str]:
    return list(CSV_HEAD) + [f"iou_{c}" for c in range(num_classes + 1)]


def report_rows(report: ExperimentReport) -> list[list[str]]:
    rows = []
    for s in report.steps:
        row = [
            str(s.step),
            report.setup,
            report.method,
            fmt_value(s.miou_old),
            fmt_value(s.miou_new),
            fmt_value(s.miou_all),
            fmt_value(s.pa_new),
            str(s.mem_bytes),
            "" if s.wall_ms is None else f"{s.wall_ms:.1f}",
        ]
        row += [fmt_value(s.per_class_iou.get(c)) for c in range(report.num_classes + 1)]
        rows.append(row)
    return rows


def to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_columns(report.num_classes))
    w.writerows(report_rows(report))
    return buf.getvalue()


def to_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def write_report(report: ExperimentReport, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "report.csv"), "w", newline="") as fh:
        fh.write(to_csv(report))
    with open(os.path.join(directory, "report.json"), "w") as fh:
        fh.write(to_json(report))


def read_report(directory: str | os.PathLike) -> ExperimentReport:
    with open(os.path.join(directory, "report.json")) as fh:
        return ExperimentReport.from_dict(json.load(fh))


def summary_table(reports: Sequence[ExperimentReport]) -> str:
    """Final-step summary of many runs, one CSV row per run."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "schedule", "setup", "seed", "steps", "status", "miou_old", "miou_new", "miou_all", "mem_bytes"])
    for r in reports:
        f = r.steps[-1] if r.steps else None
        w.writerow(
            [
                r.method,
                r.schedule,
                r.setup,
                r.seed,
                len(r.steps),
                r.status,
                fmt_value(f.miou_old) if f else "",
                fmt_value(f.miou_new) if f else "",
                fmt_value(f.miou_all) if f else "",
                f.mem_bytes if f else "",
            ]
        )
    return buf.getvalue()
