import numpy as np
import pytest

from gradcheck import REL_TOL, check_case, tiny_problem
from naive_student.model import learner, network
from naive_student.model.loss import NumericError, loss, loss_and_output_grad
from naive_student.model.targets import default_sigma, encode_targets


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    directional, coordinate = check_case(seed)
    assert directional < REL_TOL
    assert coordinate < 1.0


def test_layer_shapes_and_count():
    shapes = dict(network.layer_shapes(4, 2, 5))
    assert shapes["stem_w"] == (27, 4) and shapes["down_w"] == (36, 8)
    assert shapes["head_w"] == (12, 8) and shapes["out_w"] == (8, 8)
    assert network.parameter_count(4, 2, 5) == sum(int(np.prod(s)) for s in shapes.values())
    with pytest.raises(network.ShapeError):
        network.unflatten(np.zeros(3), 4, 2, 5)


@pytest.mark.parametrize("shape", [(16, 24), (13, 18), (5, 7)])
def test_forward_output_shape(shape):
    cfg = learner.LearnerConfig(num_logits=5, capacity=2, depth=1)
    vol = learner.forward(np.random.default_rng(0).random(shape + (3,)), learner.init_checkpoint(cfg))
    assert vol.semantic_logits.shape == shape + (5,)
    assert vol.center_heatmap.shape == shape and vol.offsets.shape == shape + (2,)


def test_forward_is_deterministic_at_inference():
    cfg = learner.LearnerConfig(num_logits=5, capacity=2, depth=2)
    ckpt = learner.init_checkpoint(cfg)
    img = np.random.default_rng(1).integers(0, 256, (8, 12, 3), dtype=np.uint8)
    a, b = learner.forward(img, ckpt), learner.forward(img, ckpt)
    np.testing.assert_array_equal(a.semantic_logits, b.semantic_logits)


def test_stochastic_depth_multipliers():
    assert network.inference_keep(3, 0.8).tolist() == [0.8, 0.8, 0.8]
    keeps = np.array([network.sample_keep(4, 0.8, np.random.default_rng(s)) for s in range(500)])
    assert set(np.unique(keeps)) <= {0.0, 1.0}
    assert abs(keeps.mean() - 0.8) < 0.05
    assert network.sample_keep(2, 1.0, np.random.default_rng(0)).tolist() == [1.0, 1.0]


def test_loss_terms_by_hand():
    # One pixel, two logits (void + one class), target class 1, thing pixel.
    out = np.zeros((1, 1, 1, 5))
    out[..., 1] = np.log(3.0)  # p(class 1) = 3 / 4
    out[..., 2] = 0.5  # heatmap prediction
    out[..., 3:] = [1.0, -2.0]
    c = encode_targets(np.array([[1001]]), 2.0, _two_class_table())
    total, parts, _ = loss_and_output_grad(out, [c], (1.0, 200.0, 0.01))
    assert parts["sem"] == pytest.approx(-np.log(0.75))
    assert parts["heatmap"] == pytest.approx(0.25)
    assert parts["offset"] == pytest.approx(3.0)
    assert total == pytest.approx(-np.log(0.75) + 50.0 + 0.03)


def _two_class_table():
    from naive_student.types import ClassInfo, ClassTable
    return ClassTable([ClassInfo(1, "car", "thing")])


def test_void_pixels_get_no_semantic_gradient():
    cfg, theta, images, targets, keep, _ = tiny_problem(0)
    for t in targets:
        t.semantic[...] = 0
    total, parts, grad = learner.loss_and_gradient(theta, cfg, images, targets, keep, (1.0, 0.0, 0.0))
    assert parts["sem"] == 0.0 and total == 0.0 and not grad.any()


def test_non_finite_predictions_raise():
    out = np.full((1, 2, 2, 4), np.nan)
    t = encode_targets(np.full((2, 2), 1001), 2.0, _two_class_table())
    with pytest.raises(NumericError):
        loss_and_output_grad(out, [t], (1, 1, 1))


def test_single_volume_loss_checks_shape():
    cfg = learner.LearnerConfig(num_logits=2, capacity=1, depth=0)
    vol = learner.forward(np.zeros((4, 4, 3)), learner.init_checkpoint(cfg))
    t = encode_targets(np.full((4, 4), 1001), 2.0, _two_class_table())
    total, parts = loss(vol, t)
    assert np.isfinite(total) and set(parts) == {"sem", "heatmap", "offset"}
    with pytest.raises(ValueError):
        loss(vol, encode_targets(np.full((4, 5), 1001), 2.0, _two_class_table()))


def test_default_sigma():
    assert default_sigma(1024) == 8.0
    assert default_sigma(2048) == 16.0
    assert default_sigma(64) == 2.0
