"""Panoptic quality.

Segments match when they share a class and their IoU exceeds 0.5, which
makes the matching unique. Ground-truth void pixels are removed from the
union, and an unmatched predicted segment lying more than half on void is
not counted as a false positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple

import numpy as np

from ..types import LABEL_DIVISOR, VOID
from .semantic import UndefinedMetricError

_PAIR = np.int64(1) << 32


@dataclass
class PQAccumulator:
    iou_sum: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_logits: int) -> "PQAccumulator":
        return cls(np.zeros(num_logits), np.zeros(num_logits, np.int64),
                   np.zeros(num_logits, np.int64), np.zeros(num_logits, np.int64))

    def merge(self, other: "PQAccumulator") -> "PQAccumulator":
        return PQAccumulator(self.iou_sum + other.iou_sum, self.tp + other.tp,
                             self.fp + other.fp, self.fn + other.fn)

    __add__ = merge


class PQResult(NamedTuple):
    pq: float
    per_class: Dict[int, float]
    sq: float
    rq: float


def panoptic_quality(pred: np.ndarray, gt: np.ndarray, num_logits: int) -> PQAccumulator:
    """Per-class PQ statistics of one prediction against its ground truth."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    acc = PQAccumulator.zeros(num_logits)

    gt_ids, gt_areas = np.unique(gt, return_counts=True)
    pred_ids, pred_areas = np.unique(pred, return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_areas.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_areas.tolist()))
    pairs, inter = np.unique(gt * _PAIR + pred, return_counts=True)
    void_overlap: Dict[int, int] = {}
    overlaps = []
    for key, n in zip(pairs.tolist(), inter.tolist()):
        g, p = divmod(key, int(_PAIR))
        if g == VOID:
            void_overlap[p] = n
        elif p != VOID:
            overlaps.append((g, p, n))

    matched_gt, matched_pred = set(), set()
    for g, p, n in overlaps:
        if g // LABEL_DIVISOR != p // LABEL_DIVISOR:
            continue
        union = pred_area[p] + gt_area[g] - n - void_overlap.get(p, 0)
        iou = n / union
        if iou > 0.5:
            cls = g // LABEL_DIVISOR
            acc.iou_sum[cls] += iou
            acc.tp[cls] += 1
            matched_gt.add(g)
            matched_pred.add(p)
    for g in gt_area:
        if g != VOID and g not in matched_gt:
            acc.fn[g // LABEL_DIVISOR] += 1
    for p, area in pred_area.items():
        if p == VOID or p in matched_pred:
            continue
        if void_overlap.get(p, 0) / area > 0.5:
            continue
        acc.fp[p // LABEL_DIVISOR] += 1
    return acc


def finalize(acc: PQAccumulator) -> PQResult:
    denom = acc.tp + 0.5 * acc.fp + 0.5 * acc.fn
    present = [k for k in range(1, acc.tp.size) if denom[k] > 0]
    if not present:
        raise UndefinedMetricError("no segments in prediction or ground truth")
    pq_c = {k: float(acc.iou_sum[k] / denom[k]) for k in present}
    sq_c = [float(acc.iou_sum[k] / acc.tp[k]) if acc.tp[k] else 0.0 for k in present]
    rq_c = [float(acc.tp[k] / denom[k]) for k in present]
    return PQResult(float(np.mean(list(pq_c.values()))), pq_c, float(np.mean(sq_c)), float(np.mean(rq_c)))
