"""Confusion matrices and the IoU / mIoU / pixel-accuracy metrics derived from them.

Undefined values (a class with no ground-truth or predicted pixels) are
``None`` and are left out of every mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import LabelMap
from .segmodel import ShapeMismatch


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, columns: prediction

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None  # type: ignore[assignment]


def _as_array(m: LabelMap | np.ndarray) -> np.ndarray:
    return m.labels if isinstance(m, LabelMap) else np.asarray(m)


def accumulate(cm: ConfusionMatrix, gt: LabelMap | np.ndarray, pred: LabelMap | np.ndarray) -> ConfusionMatrix:
    g, p = _as_array(gt), _as_array(pred)
    if g.shape != p.shape:
        raise ShapeMismatch(f"ground truth {g.shape} and prediction {p.shape} differ")
    n = cm.n_classes
    g = g.astype(np.int64).ravel()
    p = p.astype(np.int64).ravel()
    if g.size and (max(g.max(), p.max()) >= n or min(g.min(), p.min()) < 0):
        raise ValueError(f"labels outside the {n}-class universe")
    return ConfusionMatrix(cm.counts + np.bincount(g * n + p, minlength=n * n).reshape(n, n))


def merge(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    out = None
    for m in matrices:
        out = m if out is None else out + m
    if out is None:
        raise ValueError("nothing to merge")
    return out


def iou(cm: ConfusionMatrix, c: int) -> float | None:
    tp = cm.counts[c, c]
    denom = cm.counts[c, :].sum() + cm.counts[:, c].sum() - tp
    if denom == 0:
        return None
    return float(tp / denom)


def pixel_accuracy(cm: ConfusionMatrix, c: int) -> float | None:
    row = cm.counts[c, :].sum()
    if row == 0:
        return None
    return float(cm.counts[c, c] / row)


def mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def miou(cm: ConfusionMatrix, classes: Iterable[int]) -> float | None:
    return mean_defined(iou(cm, c) for c in classes)


def grouped_miou(cm: ConfusionMatrix, groups: Sequence[Iterable[int]]) -> list[float | None]:
    """Mean of the defined IoUs inside each group; an empty group yields ``None``."""
    return [miou(cm, g) for g in groups]
