"""Turn a prediction volume into a panoptic map.

Centers are heatmap peaks, thing pixels vote for the nearest center after
moving along their predicted offset, instance classes come from a majority
vote of the semantic argmax, and small stuff segments are dropped to void.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .types import LABEL_DIVISOR, VOID, ClassTable, PredictionVolume

logger = logging.getLogger(__name__)

CITYSCAPES_SIZE = (1024, 2048)
CITYSCAPES_STUFF_AREA = 4096
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class InstanceCenter(NamedTuple):
    position: tuple  # (row, col)
    score: float


@dataclass(frozen=True)
class PostprocConfig:
    center_threshold: float = 0.1
    nms_window: int = 7
    max_centers: int = 200
    stuff_area_threshold: Optional[float] = None
    stuff_area_fraction: float = CITYSCAPES_STUFF_AREA / (CITYSCAPES_SIZE[0] * CITYSCAPES_SIZE[1])

    def __post_init__(self):
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError(f"nms_window must be odd and >= 1, got {self.nms_window}")
        if self.center_threshold < 0 or self.max_centers < 0:
            raise ValueError("thresholds must be non-negative")
        if self.stuff_area_threshold is not None and self.stuff_area_threshold < 0:
            raise ValueError("stuff_area_threshold must be non-negative")

    def stuff_area(self, shape) -> float:
        """Minimum kept stuff-segment area for an image of ``shape``.

        An explicit ``stuff_area_threshold`` wins; otherwise 4096 px on
        Cityscapes-sized images and the equivalent image fraction elsewhere.
        """
        if self.stuff_area_threshold is not None:
            return float(self.stuff_area_threshold)
        if tuple(shape[:2]) == CITYSCAPES_SIZE:
            return float(CITYSCAPES_STUFF_AREA)
        return self.stuff_area_fraction * shape[0] * shape[1]


def extract_centers(heatmap: np.ndarray, config: PostprocConfig = PostprocConfig()) -> List[InstanceCenter]:
    """Local heatmap maxima above threshold, best first.

    A pixel survives if every other pixel in its ``nms_window`` neighbourhood
    is strictly lower, or equal but later in row-major order.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if not np.all(np.isfinite(heatmap)):
        raise ValueError("heatmap contains non-finite values")
    h, w = heatmap.shape
    r = config.nms_window // 2
    padded = np.pad(heatmap, r, constant_values=-np.inf)
    win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1))  # h, w, k, k
    center = heatmap[:, :, None, None]
    k = 2 * r + 1
    # Offsets earlier in row-major order than the window center.
    di, dj = np.meshgrid(np.arange(k) - r, np.arange(k) - r, indexing="ij")
    earlier = (di < 0) | ((di == 0) & (dj < 0))
    beaten = (win > center) | ((win == center) & earlier[None, None])
    is_peak = ~beaten.any(axis=(2, 3)) & (heatmap >= config.center_threshold)
    rows, cols = np.nonzero(is_peak)
    scores = heatmap[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:config.max_centers]
    return [InstanceCenter((int(rows[i]), int(cols[i])), float(scores[i])) for i in order]


def group_instances(centers: List[InstanceCenter], offsets: np.ndarray, thing_mask: np.ndarray) -> np.ndarray:
    """Assign every thing pixel to the center nearest its offset vote.

    Returns an (H, W) int map with instance ids ``1..len(centers)`` following
    the order of ``centers`` (0 = not a thing / no center).
    """
    thing_mask = np.asarray(thing_mask, dtype=bool)
    h, w = thing_mask.shape
    ids = np.zeros((h, w), dtype=np.int64)
    if not centers or not thing_mask.any():
        return ids
    rows, cols = np.nonzero(thing_mask)
    votes = np.stack([rows + offsets[rows, cols, 0], cols + offsets[rows, cols, 1]], axis=1)
    ctr = np.array([c.position for c in centers], dtype=np.float64)
    d2 = ((votes[:, None, :] - ctr[None, :, :]) ** 2).sum(axis=-1)
    ids[rows, cols] = np.argmin(d2, axis=1) + 1  # argmin keeps the first of tied centers
    return ids


def _majority(values: np.ndarray, allowed: np.ndarray) -> Optional[int]:
    """Most frequent allowed value, ties to the smaller id; None if no votes."""
    counts = np.bincount(values, minlength=allowed.size)
    counts = counts * allowed[:counts.size]
    if counts.sum() == 0:
        return None
    return int(np.argmax(counts))


def fuse_panoptic(semantic: np.ndarray, instance_ids: np.ndarray, class_table: ClassTable,
                  config: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Merge semantic and instance predictions into a panoptic map.

    ``semantic`` is either an (H, W) class-id map or (H, W, C) scores whose
    argmax over the non-void classes is taken.
    """
    semantic = np.asarray(semantic)
    if semantic.ndim == 3:
        semantic = np.argmax(semantic[..., 1:], axis=-1) + 1
    semantic = semantic.astype(np.int64)
    instance_ids = np.asarray(instance_ids)
    if semantic.shape != instance_ids.shape:
        raise ValueError(f"semantic {semantic.shape} and instance {instance_ids.shape} maps differ")
    is_thing = class_table.is_thing_lookup()
    n_logits = class_table.num_logits
    out_sem = semantic.copy()
    out_inst = np.zeros_like(semantic)

    thing_pixels = is_thing[semantic]
    out_sem[thing_pixels & (instance_ids == 0)] = VOID

    instances = []
    for k in np.unique(instance_ids[instance_ids > 0]):
        pix = instance_ids == k
        votes = semantic[pix]
        cls = _majority(votes, is_thing)
        if cls is None:
            cls = _majority(votes, np.ones(n_logits, dtype=bool))
            logger.info("instance %d has no thing-class votes; relabeled as %d", k, cls)
        out_sem[pix] = cls
        if is_thing[cls]:
            instances.append((cls, int(pix.sum()), int(k), pix))
    # Number instances 1..K per class by descending area (ties: grouping order).
    per_class = {}
    for cls, area, k, pix in sorted(instances, key=lambda x: (x[0], -x[1], x[2])):
        per_class[cls] = per_class.get(cls, 0) + 1
        out_inst[pix] = per_class[cls]

    min_area = config.stuff_area(semantic.shape)
    if min_area > 0:
        for cls in class_table.stuff_ids:
            labels, n = ndimage.label(out_sem == cls, structure=_FOUR_CONNECTED)
            if n == 0:
                continue
            areas = np.bincount(labels.ravel())
            small = np.nonzero(areas < min_area)[0]
            small = small[small > 0]
            if small.size:
                out_sem[np.isin(labels, small)] = VOID
    return (out_sem * LABEL_DIVISOR + out_inst).astype(np.int32)


def panoptic_from_volume(semantic_scores: np.ndarray, heatmap: np.ndarray, offsets: np.ndarray,
                         class_table: ClassTable, config: PostprocConfig = PostprocConfig()):
    """Full post-processing chain; returns ``(panoptic_map, instance_scores)``.

    ``instance_scores`` maps each output panoptic id to the heatmap peak value
    of the center that produced it.
    """
    semantic = np.argmax(semantic_scores[..., 1:], axis=-1) + 1
    centers = extract_centers(heatmap, config)
    thing_mask = class_table.is_thing_lookup()[semantic]
    inst = group_instances(centers, offsets, thing_mask)
    pan = fuse_panoptic(semantic, inst, class_table, config)
    scores = {}
    is_thing = class_table.is_thing_lookup()
    for k, c in enumerate(centers, start=1):
        pix = inst == k
        if not pix.any():
            continue
        ids = np.unique(pan[pix])
        for pid in ids:
            if is_thing[pid // LABEL_DIVISOR] and pid % LABEL_DIVISOR:
                scores[int(pid)] = max(scores.get(int(pid), -np.inf), c.score)
    return pan, scores


def postprocess(pred: PredictionVolume, class_table: ClassTable,
                config: PostprocConfig = PostprocConfig()) -> np.ndarray:
    return panoptic_from_volume(pred.semantic_logits, pred.center_heatmap, pred.offsets,
                                class_table, config)[0]
