"""Evaluate a checkpoint (or saved predictions) over a manifest split."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from ..dataset.lmap import load_lmap
from ..dataset.manifest import DatasetManifest, ManifestError
from ..dataset.synth import load_image
from ..postproc import PostprocConfig, panoptic_from_volume
from ..tta import NO_AUG, AugSpec, tta_predict
from .report import EvalAccumulator, MetricReport


def evaluate_frames(manifest: DatasetManifest, split: str, checkpoint,
                    postproc: PostprocConfig = PostprocConfig(), aug: AugSpec = NO_AUG) -> EvalAccumulator:
    acc = EvalAccumulator(manifest.class_table)
    for frame in _labeled_split(manifest, split):
        gt = load_lmap(manifest.path(frame.label_path))
        image = load_image(manifest.path(frame.image_path))
        fused = tta_predict(image, checkpoint, aug)
        pred, scores = panoptic_from_volume(fused.semantic_probs, fused.center_heatmap, fused.offsets,
                                            manifest.class_table, postproc)
        acc.update(pred, gt, scores, image_key=frame.key)
    return acc


def evaluate_split(manifest: DatasetManifest, split: str, checkpoint,
                   postproc: PostprocConfig = PostprocConfig(), aug: AugSpec = NO_AUG) -> MetricReport:
    """Single-pass (or TTA) metrics of ``checkpoint`` on the labeled frames of ``split``.

    Raises:
        ManifestError: if a frame of the split has no ground truth.
    """
    return evaluate_frames(manifest, split, checkpoint, postproc, aug).report()


def evaluate_directories(manifest: DatasetManifest, split: str, pred_dir,
                         gt_dir: Optional[str] = None) -> MetricReport:
    """Score saved LMAP predictions named like the ground-truth files.

    Predictions are looked up as ``pred_dir / <label_path>``; every frame of the
    split must carry a label.
    """
    pred_dir = Path(pred_dir)
    acc = EvalAccumulator(manifest.class_table)
    for frame in _labeled_split(manifest, split):
        gt_path = manifest.path(frame.label_path) if gt_dir is None else Path(gt_dir) / frame.label_path
        acc.update(load_lmap(pred_dir / frame.label_path), load_lmap(gt_path), image_key=frame.key)
    return acc.report()


def _labeled_split(manifest: DatasetManifest, split: str):
    frames = manifest.split(split)
    missing = [f.key for f in frames if not f.labeled]
    if missing:
        raise ManifestError(f"split {split!r}: {len(missing)} frame(s) without ground truth, "
                            f"e.g. {missing[0]}")
    if not frames:
        raise ManifestError(f"split {split!r} is empty")
    return frames
