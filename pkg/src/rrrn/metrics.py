"""Confusion-matrix evaluation metrics: WAR, UAR, macro F1, weighted F1.

WAR is plain accuracy; UAR is macro recall. Classes with zero support in a
fold are excluded from the UAR/F1 macro averages (their recall is undefined)
and contribute zero weight to WF1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyMatrixError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count grid, rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("negative counts")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError("label/prediction length mismatch")
        if y_true.size and (
            y_true.min() < 0 or y_true.max() >= num_classes
            or y_pred.min() < 0 or y_pred.max() >= num_classes
        ):
            raise ValueError(f"labels outside [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot pool matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def pool_matrices(matrices) -> ConfusionMatrix:
    matrices = list(matrices)
    if not matrices:
        raise EmptyMatrixError("nothing to pool")
    out = matrices[0]
    for m in matrices[1:]:
        out = out + m
    return out


@dataclass(frozen=True)
class Metrics:
    war: float
    uar: float
    f1: float
    wf1: float

    def as_dict(self) -> dict:
        return {"war": self.war, "uar": self.uar, "f1": self.f1, "wf1": self.wf1}


def compute_metrics(cm: ConfusionMatrix | np.ndarray) -> Metrics:
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)
    counts = cm.counts
    n = counts.sum()
    if n == 0:
        raise EmptyMatrixError("empty confusion matrix")

    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1).astype(np.float64)  # N_c
    predicted = counts.sum(axis=0).astype(np.float64)
    fp = predicted - tp
    fn = support - tp
    present = support > 0

    war = float(tp.sum() / n)
    uar = float(np.mean(tp[present] / support[present]))

    f1_denom = 2.0 * tp + fp + fn
    per_class_f1 = np.divide(
        2.0 * tp, f1_denom, out=np.zeros_like(tp), where=f1_denom > 0
    )
    f1 = float(np.mean(per_class_f1[present]))
    wf1 = float(np.sum((support / n) * per_class_f1))
    return Metrics(war=war, uar=uar, f1=f1, wf1=wf1)
