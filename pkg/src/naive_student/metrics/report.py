"""Split-level evaluation combining mIOU, PQ and mask AP."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from ..types import LABEL_DIVISOR, VOID, ClassTable, split_panoptic
from .instance import APAccumulator, GroundTruthInstance, InstanceDetection, finalize_ap
from .panoptic import PQAccumulator, finalize, panoptic_quality
from .semantic import ConfusionMatrix, miou

CSV_HEADER = "iteration,split,pq,ap,miou"


def detections_from_panoptic(pred: np.ndarray, class_table: ClassTable,
                             scores: Optional[Mapping[int, float]] = None, valid: Optional[np.ndarray] = None):
    """Thing segments of a panoptic map as scored detections.

    Masks are restricted to ``valid`` (non-void ground truth) pixels; segments
    with nothing left are dropped. Segments without a score get 1.0.
    """
    is_thing = class_table.is_thing_lookup()
    dets = []
    for pid in np.unique(pred):
        sem, inst = divmod(int(pid), LABEL_DIVISOR)
        if not (is_thing[sem] and inst):
            continue
        mask = pred == pid
        if valid is not None:
            mask &= valid
        if mask.any():
            dets.append(InstanceDetection(mask, sem, 1.0 if scores is None else float(scores.get(int(pid), 0.0))))
    return dets


def gt_instances(gt: np.ndarray, class_table: ClassTable):
    is_thing = class_table.is_thing_lookup()
    out = []
    for pid in np.unique(gt):
        sem, inst = divmod(int(pid), LABEL_DIVISOR)
        if is_thing[sem] and inst:
            out.append(GroundTruthInstance(gt == pid, sem))
    return out


@dataclass
class EvalAccumulator:
    class_table: ClassTable
    confusion: ConfusionMatrix = None
    pq: PQAccumulator = None
    ap: APAccumulator = field(default_factory=APAccumulator)
    images: int = 0

    def __post_init__(self):
        n = self.class_table.num_logits
        if self.confusion is None:
            self.confusion = ConfusionMatrix(n)
        if self.pq is None:
            self.pq = PQAccumulator.zeros(n)

    def update(self, pred: np.ndarray, gt: np.ndarray, scores: Optional[Mapping[int, float]] = None,
               image_key: str = "") -> "EvalAccumulator":
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        gt_sem, _ = split_panoptic(gt)
        pred_sem, _ = split_panoptic(pred)
        self.confusion.update(gt_sem, pred_sem)
        self.pq = self.pq + panoptic_quality(pred, gt, self.class_table.num_logits)
        valid = gt_sem != VOID
        self.ap.update(detections_from_panoptic(pred, self.class_table, scores, valid),
                       gt_instances(gt, self.class_table), image_key)
        self.images += 1
        return self

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        return EvalAccumulator(self.class_table, self.confusion + other.confusion, self.pq + other.pq,
                               self.ap + other.ap, self.images + other.images)

    __add__ = merge

    def report(self) -> "MetricReport":
        per_iou, m = miou(self.confusion)
        pq = finalize(self.pq)
        ap, per_ap = finalize_ap(self.ap)
        things = [pq.per_class[k] for k in self.class_table.thing_ids if k in pq.per_class]
        stuff = [pq.per_class[k] for k in self.class_table.stuff_ids if k in pq.per_class]
        return MetricReport(pq.pq, ap, m, pq.sq, pq.rq,
                            float(np.mean(things)) if things else float("nan"),
                            float(np.mean(stuff)) if stuff else float("nan"),
                            pq.per_class, per_ap, per_iou, self.images, self.class_table)


@dataclass
class MetricReport:
    pq: float
    ap: float
    miou: float
    sq: float
    rq: float
    pq_things: float
    pq_stuff: float
    per_class_pq: Dict[int, float]
    per_class_ap: Dict[int, float]
    per_class_iou: Dict[int, float]
    images: int
    class_table: ClassTable

    def to_text(self) -> str:
        out = io.StringIO()
        for key in ("pq", "ap", "miou", "sq", "rq", "pq_things", "pq_stuff"):
            out.write(f"{key} = {getattr(self, key):.10f}\n")
        out.write(f"images = {self.images}\n\n")
        out.write(f"{'id':>3} {'name':<12} {'kind':<6} {'pq':>8} {'ap':>8} {'iou':>8}\n")
        for c in self.class_table:
            cells = []
            for table in (self.per_class_pq, self.per_class_ap, self.per_class_iou):
                cells.append(f"{table[c.id]:8.4f}" if c.id in table else f"{'-':>8}")
            out.write(f"{c.id:>3} {c.name:<12} {c.kind:<6} {' '.join(cells)}\n")
        return out.getvalue()

    def csv_row(self, iteration: int, split: str) -> str:
        return f"{iteration},{split},{self.pq:.10f},{self.ap:.10f},{self.miou:.10f}"
