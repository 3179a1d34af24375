"""Supervision targets derived from a panoptic map."""

import numpy as np

from ..types import ClassTable, TrainingTargets, split_panoptic, validate_panoptic


class EncodingError(ValueError):
    pass


def default_sigma(height: int) -> float:
    """Center-Gaussian width: 8 px at 1024 rows, scaled with image height.

    Floored at 2 px because sub-pixel Gaussians cannot be fit by a stride-4
    decoder on desk-scale images.
    """
    return max(8.0 * height / 1024.0, 2.0)


def instance_segments(ids: np.ndarray, class_table: ClassTable):
    """Yield ``(panoptic_id, rows, cols)`` for every thing instance in ``ids``."""
    sem, inst = split_panoptic(ids)
    is_thing = class_table.is_thing_lookup()[sem]
    thing_ids = np.unique(ids[is_thing])
    for pid in thing_ids:
        rows, cols = np.nonzero(ids == pid)
        yield int(pid), rows, cols


def encode_targets(ids: np.ndarray, sigma: float, class_table: ClassTable) -> TrainingTargets:
    """Encode a panoptic map as semantic/heatmap/offset regression targets.

    Each thing instance contributes a unit-peak Gaussian centred on its mass
    center (merged by per-pixel max), and each of its pixels regresses the
    vector ``center - pixel``.
    """
    ids = np.asarray(ids)
    sem, inst = split_panoptic(ids)
    is_thing = class_table.is_thing_lookup()[np.minimum(sem, len(class_table))]
    if np.any(is_thing & (inst == 0)):
        raise EncodingError("thing class pixel with instance index 0")
    validate_panoptic(ids, class_table)
    if sigma <= 0:
        raise EncodingError(f"sigma must be positive, got {sigma}")

    h, w = ids.shape
    heatmap = np.zeros((h, w))
    offsets = np.zeros((h, w, 2))
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    for _, rows, cols in instance_segments(ids, class_table):
        cr, ccol = rows.mean(), cols.mean()
        g = np.exp(-((rr - cr) ** 2 + (cc - ccol) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heatmap, g, out=heatmap)
        offsets[rows, cols, 0] = cr - rows
        offsets[rows, cols, 1] = ccol - cols
    return TrainingTargets(sem.astype(np.int64), heatmap, offsets, is_thing.copy())
