"""Confusion matrix, per-class IoU and mIoU."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth g predicted as p."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = (np.zeros((n_classes, n_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def accumulate(self, labels, preds) -> "ConfusionMatrix":
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        p = np.asarray(preds, dtype=np.int64).reshape(-1)
        if y.shape != p.shape:
            raise ValueError("labels and predictions differ in size")
        c = self.n_classes
        if y.size:
            self.counts += np.bincount(c * y + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self) -> tuple[np.ndarray, float]:
        return miou(self)


def accumulate(cm: ConfusionMatrix, labels, preds) -> ConfusionMatrix:
    return ConfusionMatrix(cm.n_classes, cm.counts).accumulate(labels, preds)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for absent classes) and their mean over present classes."""
    k = cm.counts.astype(np.float64)
    inter = np.diag(k)
    union = k.sum(axis=1) + k.sum(axis=0) - inter
    present = union > 0
    if not present.any():
        raise ValueError("no classes present")
    iou = np.full(cm.n_classes, np.nan)
    iou[present] = inter[present] / union[present]
    return iou, float(np.mean(iou[present]))
