import numpy as np
import pytest
from hypothesis import given, strategies as st

from builders import flip_equivariance_case, flip_equivariant_checkpoint
from conftest import TABLE
from naive_student.model import learner
from naive_student.postproc import PostprocConfig
from naive_student.tta import (NO_AUG, AugmentationError, AugSpec, FusedPrediction, apply_aug, fuse,
                               invert_prediction, pseudo_label, tta_predict, unwarp)
from naive_student.types import PredictionVolume


def _random_fused(rng, h, w, c=5):
    p = rng.random((h, w, c))
    return FusedPrediction(p / p.sum(-1, keepdims=True), rng.random((h, w)), rng.normal(0, 3, (h, w, 2)))


@given(st.integers(0, 2**32 - 1))
def test_double_flip_inversion_is_identity(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 12, size=2)
    pred = _random_fused(rng, h, w)
    twice = unwarp(unwarp(pred, 1.0, True, (h, w)), 1.0, True, (h, w))
    for a, b in [(twice.semantic_probs, pred.semantic_probs), (twice.center_heatmap, pred.center_heatmap),
                 (twice.offsets, pred.offsets)]:
        assert np.array_equal(a, b)
    img = rng.random((h, w, 3))
    assert np.array_equal(apply_aug(apply_aug(img, 1.0, True), 1.0, True), img)


def test_flip_inversion_negates_column_offsets():
    off = np.zeros((1, 3, 2))
    off[0, 0] = [1.0, 2.0]
    pred = FusedPrediction(np.ones((1, 3, 2)) / 2, np.arange(3.0)[None], off)
    out = unwarp(pred, 1.0, True, (1, 3))
    assert out.offsets[0, 2].tolist() == [1.0, -2.0]
    assert out.center_heatmap.tolist() == [[2.0, 1.0, 0.0]]


def test_scale_inversion_rescales_offsets():
    pred = FusedPrediction(np.full((8, 12, 2), 0.5), np.zeros((8, 12)), np.ones((8, 12, 2)))
    out = unwarp(pred, 2.0, False, (4, 6))
    assert out.shape == (4, 6)
    np.testing.assert_allclose(out.offsets, 0.5)
    with pytest.raises(ValueError):
        unwarp(pred, 1.5, False, (4, 6))


def test_aug_spec_passes_and_validation():
    assert AugSpec(scales=(1.0, 0.5), flip=True).passes() == [(0.5, False), (0.5, True), (1.0, False),
                                                              (1.0, True)]
    assert NO_AUG.passes() == [(1.0, False)]
    with pytest.raises(AugmentationError):
        AugSpec(scales=())
    with pytest.raises(AugmentationError):
        apply_aug(np.zeros((2, 2, 3)), 0.1, False)


def test_fuse_is_a_mean():
    rng = np.random.default_rng(0)
    a, b = _random_fused(rng, 3, 4), _random_fused(rng, 3, 4)
    f = fuse([a, b])
    np.testing.assert_allclose(f.semantic_probs, (a.semantic_probs + b.semantic_probs) / 2)
    with pytest.raises(ValueError):
        fuse([])
    with pytest.raises(ValueError):
        fuse([a, _random_fused(rng, 4, 4)])


def test_single_pass_tta_equals_plain_forward():
    cfg = learner.LearnerConfig(num_logits=TABLE.num_logits, capacity=2, depth=1)
    ckpt = learner.init_checkpoint(cfg)
    img = np.random.default_rng(2).random((12, 16, 3))
    fused = tta_predict(img, ckpt, NO_AUG)
    ref = invert_prediction(learner.forward(img, ckpt), 1.0, False, (12, 16))
    np.testing.assert_array_equal(fused.semantic_probs, ref.semantic_probs)


def test_equivariant_model_really_is_equivariant():
    ckpt = flip_equivariant_checkpoint(TABLE.num_logits, 0)
    img = np.random.default_rng(0).random((12, 32, 3))
    a = learner.forward(img, ckpt)
    b = learner.forward(img[:, ::-1], ckpt)
    np.testing.assert_allclose(b.semantic_logits[:, ::-1], a.semantic_logits, atol=1e-12)
    np.testing.assert_allclose(b.center_heatmap[:, ::-1], a.center_heatmap, atol=1e-12)
    assert not a.offsets[..., 1].any()


@pytest.mark.parametrize("seed", range(5))
def test_flip_tta_is_redundant_for_equivariant_model(seed):
    a, b = flip_equivariance_case(seed)
    assert np.array_equal(a, b)


def test_pseudo_label_ego_void_and_semantic_only():
    cfg = learner.LearnerConfig(num_logits=TABLE.num_logits, capacity=2, depth=1)
    ckpt = learner.init_checkpoint(cfg)
    img = np.random.default_rng(3).random((12, 16, 3))
    ego = np.zeros((12, 16), bool)
    ego[-3:] = True
    cfg_pp = PostprocConfig(stuff_area_threshold=0)
    pan, scores = pseudo_label(img, ckpt, AugSpec(scales=(1.0, 1.5)), cfg_pp, TABLE, ego, return_scores=True)
    assert not pan[ego].any()
    assert set(scores) <= set(np.unique(pan).tolist())
    sem_only = tta_predict(img, ckpt, AugSpec(scales=(0.5, 1.5), fuse_semantic_only=True))
    ref = invert_prediction(learner.forward(img, ckpt), 1.0, False, (12, 16))
    np.testing.assert_array_equal(sem_only.center_heatmap, ref.center_heatmap)
    with pytest.raises(ValueError):
        pseudo_label(img, ckpt, NO_AUG, cfg_pp, TABLE, np.zeros((3, 3), bool))


def test_invert_applies_softmax():
    vol = PredictionVolume(np.zeros((2, 2, 4)), np.zeros((2, 2)), np.zeros((2, 2, 2)))
    np.testing.assert_allclose(invert_prediction(vol, 1.0, False, (2, 2)).semantic_probs, 0.25)
