"""Core data containers shared across the pipeline.

Panoptic maps are plain ``int32`` numpy arrays of shape ``(H, W)`` holding
``semantic_id * LABEL_DIVISOR + instance_index``. Everything else that needs
more structure than an array lives here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Sequence

import numpy as np

LABEL_DIVISOR = 1000
VOID = 0
MAX_INSTANCES = 999


class PanopticError(ValueError):
    """A panoptic map violates the id encoding."""


class ClassInfo(NamedTuple):
    id: int
    name: str
    kind: str  # "thing" or "stuff"

    @property
    def is_thing(self) -> bool:
        return self.kind == "thing"


class ClassTable(tuple):
    """Immutable ordered collection of :class:`ClassInfo`.

    Semantic ids must be exactly ``1..K`` so that they double as logit indices
    (index 0 is reserved for void).
    """

    def __new__(cls, classes: Iterable[ClassInfo | Sequence]):
        items = tuple(c if isinstance(c, ClassInfo) else ClassInfo(int(c[0]), str(c[1]), str(c[2]))
                      for c in classes)
        ids = [c.id for c in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate semantic ids in class table: {ids}")
        if VOID in ids:
            raise ValueError("semantic id 0 is reserved for void")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"semantic ids must be contiguous 1..K, got {ids}")
        for c in items:
            if c.kind not in ("thing", "stuff"):
                raise ValueError(f"class kind must be 'thing' or 'stuff', got {c.kind!r}")
        return super().__new__(cls, sorted(items, key=lambda c: c.id))

    @property
    def num_logits(self) -> int:
        return len(self) + 1

    @property
    def thing_ids(self) -> List[int]:
        return [c.id for c in self if c.is_thing]

    @property
    def stuff_ids(self) -> List[int]:
        return [c.id for c in self if not c.is_thing]

    def is_thing_lookup(self) -> np.ndarray:
        """Boolean array indexed by semantic id (void -> False)."""
        lut = np.zeros(self.num_logits, dtype=bool)
        lut[self.thing_ids] = True
        return lut


def make_panoptic(semantic: np.ndarray, instance: np.ndarray) -> np.ndarray:
    return (np.asarray(semantic, dtype=np.int64) * LABEL_DIVISOR
            + np.asarray(instance, dtype=np.int64)).astype(np.int32)


def split_panoptic(ids: np.ndarray):
    """Return ``(semantic, instance)`` channels of a panoptic map."""
    ids = np.asarray(ids)
    return ids // LABEL_DIVISOR, ids % LABEL_DIVISOR


def validate_panoptic(ids: np.ndarray, class_table: ClassTable | None = None) -> np.ndarray:
    """Check the id encoding and return the map as ``int32``.

    Raises:
        PanopticError: on negative ids, unknown classes, stuff/void pixels
            carrying an instance index, or thing pixels without one.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise PanopticError(f"panoptic map must be 2-D, got shape {ids.shape}")
    if ids.size and ids.min() < 0:
        raise PanopticError("panoptic ids must be non-negative")
    sem, inst = split_panoptic(ids)
    if class_table is not None:
        if ids.size and sem.max() > len(class_table):
            raise PanopticError(f"semantic id {int(sem.max())} not in class table")
        is_thing = class_table.is_thing_lookup()[sem]
        if np.any(inst[~is_thing] != 0):
            raise PanopticError("stuff or void pixel carries a nonzero instance index")
        if np.any(inst[is_thing] == 0):
            raise PanopticError("thing pixel has instance index 0")
    else:
        if np.any(inst[sem == VOID] != 0):
            raise PanopticError("void pixel carries a nonzero instance index")
    return ids.astype(np.int32, copy=False)


@dataclass
class PredictionVolume:
    """Raw network output for one image.

    ``semantic_logits`` is ``(H, W, C)``; index 0 is void and never supervised.
    ``offsets`` is ``(H, W, 2)`` in pixels, ``(drow, dcol)`` toward the center.
    """

    semantic_logits: np.ndarray
    center_heatmap: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        h, w = self.center_heatmap.shape
        if self.semantic_logits.shape[:2] != (h, w) or self.offsets.shape != (h, w, 2):
            raise ValueError("prediction grids disagree on spatial size")

    @property
    def shape(self):
        return self.center_heatmap.shape


@dataclass
class TrainingTargets:
    semantic: np.ndarray  # (H, W) int, 0 = void
    heatmap: np.ndarray  # (H, W) float in [0, 1]
    offsets: np.ndarray  # (H, W, 2) float
    thing_mask: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.semantic.shape
