"""Pixel confusion matrix and mean IoU."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from ..types import VOID


class UndefinedMetricError(ValueError):
    """The metric has nothing to average over."""


class ConfusionMatrix:
    """Counts of (ground-truth class, predicted class) over non-void gt pixels.

    Index 0 is void; it only ever appears as a predicted class.
    """

    def __init__(self, num_logits: int, counts: np.ndarray | None = None):
        self.num_logits = int(num_logits)
        if counts is None:
            counts = np.zeros((num_logits, num_logits), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def update(self, gt_semantic: np.ndarray, pred_semantic: np.ndarray) -> "ConfusionMatrix":
        gt_semantic = np.asarray(gt_semantic, dtype=np.int64)
        pred_semantic = np.asarray(pred_semantic, dtype=np.int64)
        if gt_semantic.shape != pred_semantic.shape:
            raise ValueError(f"shape mismatch: {gt_semantic.shape} vs {pred_semantic.shape}")
        m = gt_semantic != VOID
        n = self.num_logits
        idx = gt_semantic[m] * n + pred_semantic[m]
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_logits, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(confusion: ConfusionMatrix) -> Tuple[Dict[int, float], float]:
    """Per-class IoU and their mean over classes seen in gt or prediction."""
    c = confusion.counts.astype(np.float64)
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    per_class = {}
    for k in range(1, confusion.num_logits):
        denom = rows[k] + cols[k] - diag[k]
        if denom > 0:
            per_class[k] = float(diag[k] / denom)
    if not per_class:
        raise UndefinedMetricError("no class occurs in ground truth or prediction")
    return per_class, float(np.mean(list(per_class.values())))
