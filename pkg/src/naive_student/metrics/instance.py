"""COCO-style mask average precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .semantic import UndefinedMetricError

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class InstanceDetection(NamedTuple):
    mask: np.ndarray
    semantic_id: int
    score: float


class GroundTruthInstance(NamedTuple):
    mask: np.ndarray
    semantic_id: int


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


@dataclass
class APAccumulator:
    """Score-ranked match flags per class, mergeable across images.

    ``records[c]`` holds ``(score, image_key, det_index, tp_flags)`` tuples;
    ``num_gt[c]`` counts ground-truth instances.
    """

    records: Dict[int, List[Tuple[float, str, int, np.ndarray]]] = field(default_factory=dict)
    num_gt: Dict[int, int] = field(default_factory=dict)

    def merge(self, other: "APAccumulator") -> "APAccumulator":
        records = {k: list(v) for k, v in self.records.items()}
        for k, v in other.records.items():
            records.setdefault(k, []).extend(v)
        num_gt = dict(self.num_gt)
        for k, v in other.num_gt.items():
            num_gt[k] = num_gt.get(k, 0) + v
        return APAccumulator(records, num_gt)

    __add__ = merge

    def update(self, detections: Sequence[InstanceDetection], gts: Sequence[GroundTruthInstance],
               image_key: str = "") -> "APAccumulator":
        classes = {d.semantic_id for d in detections} | {g.semantic_id for g in gts}
        for cls in sorted(classes):
            dets = [(i, d) for i, d in enumerate(detections) if d.semantic_id == cls]
            dets.sort(key=lambda x: (-x[1].score, x[0]))
            cls_gts = [g.mask for g in gts if g.semantic_id == cls]
            self.num_gt[cls] = self.num_gt.get(cls, 0) + len(cls_gts)
            ious = np.array([[_iou(d.mask, g) for g in cls_gts] for _, d in dets]).reshape(len(dets), len(cls_gts))
            flags = np.zeros((len(dets), IOU_THRESHOLDS.size), dtype=bool)
            for t, thr in enumerate(IOU_THRESHOLDS):
                taken = np.zeros(len(cls_gts), dtype=bool)
                for row in range(len(dets)):
                    cand = np.where(taken, -1.0, ious[row])
                    if cand.size == 0:
                        break
                    best = int(np.argmax(cand))
                    if cand[best] >= thr:
                        taken[best] = True
                        flags[row, t] = True
            recs = self.records.setdefault(cls, [])
            for (i, d), f in zip(dets, flags):
                recs.append((float(d.score), image_key, i, f))
        return self


def ap_from_flags(scores: np.ndarray, flags: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of score-sorted match flags at one threshold."""
    if num_gt == 0:
        raise UndefinedMetricError("no ground-truth instances")
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


def finalize_ap(acc: APAccumulator) -> Tuple[float, Dict[int, float]]:
    """Mean AP over IoU thresholds and over classes present in ground truth."""
    per_class = {}
    for cls in sorted(acc.num_gt):
        n = acc.num_gt[cls]
        if n == 0:
            continue
        recs = sorted(acc.records.get(cls, []), key=lambda r: (-r[0], r[1], r[2]))
        scores = np.array([r[0] for r in recs])
        flags = np.array([r[3] for r in recs], dtype=bool).reshape(len(recs), IOU_THRESHOLDS.size)
        per_class[cls] = float(np.mean([ap_from_flags(scores, flags[:, t], n)
                                        for t in range(IOU_THRESHOLDS.size)]))
    if not per_class:
        raise UndefinedMetricError("no ground-truth instances in any class")
    return float(np.mean(list(per_class.values()))), per_class


def average_precision(detections_per_image: Sequence[Sequence[InstanceDetection]],
                      gt_per_image: Sequence[Sequence[GroundTruthInstance]]) -> float:
    acc = APAccumulator()
    for i, (dets, gts) in enumerate(zip(detections_per_image, gt_per_image)):
        acc.update(dets, gts, image_key=f"{i:08d}")
    return finalize_ap(acc)[0]
