"""Overall accuracy and per-class IoU from a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


class ConfusionMatrix:
    """counts[t, p] = number of points of true class t predicted as p."""

    def __init__(self, num_classes):
        if num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, predictions, labels):
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if predictions.shape != labels.shape:
            raise ContractError(f"{predictions.size} predictions for {labels.size} labels")
        c = self.num_classes
        for arr, what in ((predictions, "prediction"), (labels, "label")):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ContractError(f"{what} outside [0, {c})")
        self.counts += np.bincount(labels * c + predictions, minlength=c * c).reshape(c, c)
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def metrics(self):
        return compute_metrics(self.counts)


@dataclass
class Metrics:
    overall_accuracy: float
    per_class_iou: np.ndarray
    mean_iou: float


def compute_metrics(counts):
    """OA = trace / total; IoU_c = TP / (T + P - TP).

    A class that is neither present nor predicted (T = P = 0) gets IoU NaN and
    is left out of the mean; present-but-never-predicted or predicted-but-absent
    classes score 0.
    """
    counts = np.asarray(counts)
    total = counts.sum()
    if total == 0:
        raise ContractError("no points were evaluated")
    tp = np.diag(counts).astype(np.float64)
    t = counts.sum(axis=1).astype(np.float64)
    p = counts.sum(axis=0).astype(np.float64)
    union = t + p - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return Metrics(float(tp.sum() / total), iou, miou)


def iou_from_counts(tp, t, p):
    """IoU of one class from true positives, ground-truth and predicted counts."""
    if not 0 <= tp <= min(t, p):
        raise ContractError(f"inconsistent counts TP={tp}, T={t}, P={p}")
    union = t + p - tp
    return float("nan") if union == 0 else tp / union
