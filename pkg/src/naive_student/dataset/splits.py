"""Manifest transformations: ego-car void propagation and fraction sampling."""

from __future__ import annotations

import math
from typing import List

import numpy as np

from ..types import VOID, split_panoptic
from .lmap import load_lmap, save_mask
from .manifest import DatasetManifest, FrameRecord, ManifestError

EGO_MODES = ("all-void", "rect")


class MissingLabelError(ManifestError):
    pass


def ego_void_mask(label: np.ndarray, mode: str = "all-void", rect=None) -> np.ndarray:
    """Ego-car pixels of a labeled frame.

    ``all-void`` takes every void pixel; ``rect`` keeps only void pixels inside
    the ``(row0, row1, col0, col1)`` rectangle.
    """
    sem, _ = split_panoptic(label)
    mask = sem == VOID
    if mode == "rect":
        if rect is None:
            raise ManifestError("ego mode 'rect' needs an @ego_rect entry in the manifest")
        r0, r1, c0, c1 = rect
        region = np.zeros_like(mask)
        region[r0:r1, c0:c1] = True
        mask &= region
    elif mode != "all-void":
        raise ValueError(f"unknown ego mode {mode!r}; expected one of {EGO_MODES}")
    return mask


def propagate_ego_car(manifest: DatasetManifest, enabled: bool = True, mode: str = "all-void",
                      out_subdir: str = "ego") -> DatasetManifest:
    """Attach the labeled frame's ego-void mask to every frame of its sequence.

    Masks are written as EVMK files under ``manifest.root / out_subdir``. With
    ``enabled=False`` the manifest is returned with ``ego_void_path`` cleared on
    unlabeled frames.
    """
    if not enabled:
        return manifest.with_frames(f if f.labeled else f.replace(ego_void_path=None)
                                    for f in manifest.frames)
    frames: List[FrameRecord] = []
    for seq_id, seq_frames in manifest.sequences().items():
        labeled = [f for f in seq_frames if f.labeled]
        if not labeled:
            raise MissingLabelError(f"sequence {seq_id} has no labeled frame")
        mask = ego_void_mask(load_lmap(manifest.path(labeled[0].label_path)), mode, manifest.ego_rect)
        rel = f"{out_subdir}/{seq_id}.evmk"
        (manifest.root / out_subdir).mkdir(parents=True, exist_ok=True)
        save_mask(mask, manifest.root / rel)
        frames.extend(f.replace(ego_void_path=rel) for f in seq_frames)
    order = {f.key: i for i, f in enumerate(manifest.frames)}
    frames.sort(key=lambda f: order[f.key])
    return manifest.with_frames(frames)


def sample_fraction(manifest: DatasetManifest, split: str, kind: str, fraction: float,
                    seed: int) -> DatasetManifest:
    """Deterministic nested subset of a split.

    ``kind="labeled"`` samples labeled frames of ``split``; ``kind="pseudo"``
    samples whole sequences and keeps all of their frames in ``split``. The
    first ``ceil(fraction * count)`` items of one seeded permutation are kept,
    so smaller fractions are subsets of larger ones.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    frames = manifest.split(split)
    if kind == "labeled":
        items = [f.key for f in frames if f.labeled]
    elif kind == "pseudo":
        items = sorted({f.sequence_id for f in frames})
    else:
        raise ValueError(f"kind must be 'labeled' or 'pseudo', got {kind!r}")
    if fraction == 1.0:
        keep = set(items)
    else:
        perm = np.random.default_rng(seed).permutation(len(items))
        k = int(math.ceil(fraction * len(items) - 1e-12))
        keep = {items[i] for i in perm[:k]}
    if kind == "labeled":
        selected = [f for f in frames if f.key in keep]
    else:
        selected = [f for f in frames if f.sequence_id in keep]
    return manifest.with_frames(selected)
