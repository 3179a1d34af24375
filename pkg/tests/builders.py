"""Constructed models and datasets shared by several test modules."""

import numpy as np

from conftest import TABLE
from naive_student.model import learner
from naive_student.tta import DEFAULT_SCALES, AugSpec, tta_predict


def flip_equivariant_checkpoint(num_logits, seed, capacity=3, depth=1):
    """Random checkpoint whose semantic and heatmap outputs commute with mirroring.

    Every 3x3 kernel is averaged with its left-right mirror and the
    column-offset channel is zeroed, so running on a flipped image returns
    the flipped prediction (with the column offset trivially negated). The
    property holds exactly in exact arithmetic whenever widths stay
    multiples of the network stride.
    """
    cfg = learner.LearnerConfig(num_logits=num_logits, capacity=capacity, depth=depth, rng_seed=seed)
    ckpt = learner.init_checkpoint(cfg)
    rng = np.random.default_rng(seed)
    ckpt.parameters += rng.normal(0, 0.2, ckpt.parameters.size)
    for name, arr in ckpt.params().items():
        if name.endswith("_w") and arr.shape[0] % 9 == 0 and name not in ("head_w", "out_w"):
            k = arr.reshape(3, 3, arr.shape[0] // 9, arr.shape[1])
            k[...] = 0.5 * (k + k[:, ::-1].copy())
    p = ckpt.params()
    p["out_w"][:, -1] = 0.0
    p["out_b"][-1] = 0.0
    return ckpt


def flip_equivariance_case(seed, scales=DEFAULT_SCALES):
    """Semantic argmax of TTA with and without flips for a flip-equivariant model."""
    rng = np.random.default_rng(seed)
    ckpt = flip_equivariant_checkpoint(TABLE.num_logits, seed)
    h, w = int(rng.integers(8, 20)), 16 * int(rng.integers(1, 3))
    img = rng.random((h, w, 3))
    with_flip = tta_predict(img, ckpt, AugSpec(scales=scales, flip=True))
    without = tta_predict(img, ckpt, AugSpec(scales=scales, flip=False))
    return with_flip.semantic_probs.argmax(-1), without.semantic_probs.argmax(-1)
