"""Weighted / unweighted accuracy from a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InputError


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = true class, cols = predicted
    wa: float
    ua: float
    acc: float

    def as_dict(self) -> dict:
        return {"wa": self.wa, "ua": self.ua, "acc": self.acc, "confusion": self.confusion.tolist()}


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise InputError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise InputError(f"class ids must lie in [0, {n_classes})")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def exact_rates(confusion) -> tuple:
    """(WA, UA, ACC) as exact fractions; classes without true instances are
    left out of the UA mean."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise InputError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise InputError("confusion counts must be nonnegative")
    total = int(cm.sum())
    if total == 0:
        raise InputError("confusion matrix is empty")
    wa = Fraction(int(np.trace(cm)), total)
    support = cm.sum(axis=1)
    recalls = [Fraction(int(cm[i, i]), int(support[i])) for i in range(cm.shape[0]) if support[i] > 0]
    ua = sum(recalls, Fraction(0)) / len(recalls)
    return wa, ua, (wa + ua) / 2


def compute_metrics(confusion) -> MetricsReport:
    wa, ua, _ = exact_rates(confusion)
    wa, ua = float(wa), float(ua)
    return MetricsReport(np.asarray(confusion, dtype=np.int64), wa, ua, (wa + ua) / 2)
