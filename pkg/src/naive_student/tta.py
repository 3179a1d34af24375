"""Test-time augmentation and hard pseudo-label generation.

Each image is run at every ``(scale, flip)`` combination, each prediction is
warped back to the original frame (softmax, bilinear resize, offset
rescaling, un-mirroring), the aligned predictions are averaged, and the fused
volume is post-processed into a one-hot panoptic label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import hflip, resize_bilinear, scaled_size
from .model import learner
from .postproc import PostprocConfig, panoptic_from_volume
from .types import VOID, ClassTable, PredictionVolume

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugSpec:
    scales: Tuple[float, ...] = DEFAULT_SCALES
    flip: bool = True
    fuse_semantic_only: bool = False

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise AugmentationError(f"scales must be a nonempty list of positive reals, got {scales}")
        object.__setattr__(self, "scales", scales)

    def passes(self) -> List[Tuple[float, bool]]:
        """All ``(scale, flipped)`` combinations in fusion order."""
        flips = (False, True) if self.flip else (False,)
        return sorted((s, f) for s in self.scales for f in flips)


NO_AUG = AugSpec(scales=(1.0,), flip=False)


@dataclass
class FusedPrediction:
    semantic_probs: np.ndarray  # (H, W, C)
    center_heatmap: np.ndarray  # (H, W)
    offsets: np.ndarray  # (H, W, 2)

    @property
    def shape(self):
        return self.center_heatmap.shape


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_aug(image: np.ndarray, scale: float, flipped: bool) -> np.ndarray:
    """Resize by ``scale`` (bilinear) then optionally mirror left-right."""
    if scale <= 0:
        raise AugmentationError(f"scale must be positive, got {scale}")
    size = scaled_size(image.shape, scale)
    if min(size) < 1:
        raise AugmentationError(f"scale {scale} shrinks a {image.shape[:2]} image below one pixel")
    out = image if size == tuple(image.shape[:2]) else resize_bilinear(image, size)
    return hflip(out) if flipped else np.array(out, copy=True)


def unwarp(pred: FusedPrediction, scale: float, flipped: bool, original_size) -> FusedPrediction:
    """Bring a probability-space prediction back to the unaugmented frame.

    Offsets are rescaled per axis by ``original / augmented`` size, which is
    exactly ``1 / scale`` whenever the augmented size is not rounded.
    """
    probs, heat, off = pred.semantic_probs, pred.center_heatmap, pred.offsets
    expected = scaled_size(original_size, scale)
    if heat.shape != expected:
        raise ValueError(f"prediction of size {heat.shape} does not match scale {scale} "
                         f"of original size {tuple(original_size)} (expected {expected})")
    if flipped:
        probs, heat, off = hflip(probs), hflip(heat), hflip(off)
        off[..., 1] = -off[..., 1]
    oh, ow = original_size
    if heat.shape != (oh, ow):
        ratio = np.array([oh / heat.shape[0], ow / heat.shape[1]])
        probs = resize_bilinear(probs, (oh, ow))
        heat = resize_bilinear(heat, (oh, ow))
        off = resize_bilinear(off, (oh, ow)) * ratio
    return FusedPrediction(probs, heat, off)


def invert_prediction(pred: PredictionVolume, scale: float, flipped: bool, original_size) -> FusedPrediction:
    """Softmax the logits, then :func:`unwarp` every grid."""
    return unwarp(FusedPrediction(softmax(pred.semantic_logits), pred.center_heatmap, pred.offsets),
                  scale, flipped, original_size)


def fuse(predictions: Sequence[FusedPrediction]) -> FusedPrediction:
    """Per-pixel arithmetic mean of aligned predictions."""
    if len(predictions) == 0:
        raise ValueError("cannot fuse an empty list of predictions")
    shape = predictions[0].shape
    if any(p.shape != shape for p in predictions):
        raise ValueError("predictions to fuse must share the original frame size")
    n = len(predictions)
    probs = np.sum([p.semantic_probs for p in predictions], axis=0) / n
    heat = np.sum([p.center_heatmap for p in predictions], axis=0) / n
    off = np.sum([p.offsets for p in predictions], axis=0) / n
    return FusedPrediction(probs, heat, off)


def _as_unit_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def tta_predict(image: np.ndarray, checkpoint, aug: AugSpec = AugSpec(), forward=None) -> FusedPrediction:
    """Fused prediction of ``checkpoint`` over every pass of ``aug``."""
    forward = forward or learner.forward
    base = _as_unit_float(image)
    size = base.shape[:2]
    aligned = []
    reference = None
    for scale, flipped in aug.passes():
        vol = forward(apply_aug(base, scale, flipped), checkpoint, training=False)
        inv = invert_prediction(vol, scale, flipped, size)
        aligned.append(inv)
        if scale == 1.0 and not flipped:
            reference = inv
    fused = fuse(aligned)
    if aug.fuse_semantic_only:
        if reference is None:
            vol = forward(base, checkpoint, training=False)
            reference = invert_prediction(vol, 1.0, False, size)
        fused = FusedPrediction(fused.semantic_probs, reference.center_heatmap, reference.offsets)
    return fused


def pseudo_label(image: np.ndarray, checkpoint, aug: AugSpec, postproc_config: PostprocConfig,
                 class_table: ClassTable, ego_void: Optional[np.ndarray] = None,
                 return_scores: bool = False, forward=None):
    """Hard panoptic pseudo-label for one unlabeled frame.

    No confidence filtering is applied; pixels under ``ego_void`` are forced
    to void.
    """
    fused = tta_predict(image, checkpoint, aug, forward)
    pan, scores = panoptic_from_volume(fused.semantic_probs, fused.center_heatmap, fused.offsets,
                                       class_table, postproc_config)
    if ego_void is not None:
        ego_void = np.asarray(ego_void, dtype=bool)
        if ego_void.shape != pan.shape:
            raise ValueError(f"ego-void mask {ego_void.shape} does not match image {pan.shape}")
        pan = pan.copy()
        pan[ego_void] = VOID
        scores = {k: v for k, v in scores.items() if np.any(pan == k)}
    return (pan, scores) if return_scores else pan
