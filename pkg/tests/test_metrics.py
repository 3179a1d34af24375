import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import TABLE, random_detection_sets, random_panoptic
from oracles import ap_oracle, pq_bruteforce
from naive_student.metrics.instance import (APAccumulator, GroundTruthInstance, InstanceDetection,
                                            ap_from_flags, average_precision, finalize_ap)
from naive_student.metrics.panoptic import PQAccumulator, finalize, panoptic_quality
from naive_student.metrics.report import EvalAccumulator
from naive_student.metrics.semantic import ConfusionMatrix, UndefinedMetricError, miou

N = TABLE.num_logits


def test_miou_hand_example():
    # classes 0 and 1 only, no void: treat as ids 1 and 2 shifted by one.
    pred = np.array([[1, 1], [2, 2]])
    gt = np.array([[1, 2], [2, 2]])
    per, mean = miou(ConfusionMatrix(3).update(gt, pred))
    assert per[1] == pytest.approx(0.5)
    assert per[2] == pytest.approx(2 / 3)
    assert mean == pytest.approx(7 / 12)


def test_miou_disjoint_pair_is_zero():
    per, mean = miou(ConfusionMatrix(3).update(np.full((2, 2), 1), np.full((2, 2), 2)))
    assert per == {1: 0.0, 2: 0.0}
    assert mean == 0.0


def test_miou_excludes_void_and_absent_classes():
    gt = np.array([[0, 1], [1, 1]])
    pred = np.array([[2, 1], [1, 1]])  # the disagreeing pixel is void in gt
    per, mean = miou(ConfusionMatrix(N).update(gt, pred))
    assert per == {1: 1.0}
    assert mean == 1.0


def test_miou_undefined_when_nothing_evaluated():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(N).update(np.zeros((2, 2)), np.zeros((2, 2))))


def test_confusion_total_counts_non_void_pixels():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, N, size=(8, 8))
    cm = ConfusionMatrix(N).update(gt, rng.integers(0, N, size=(8, 8)))
    assert cm.total == int(np.sum(gt != 0))


def test_pq_spurious_segment_hand_example():
    gt = np.full((4, 4), 1000)
    gt[:2, :2] = 3001
    pred = gt.copy()
    pred[3, 3] = 3002  # spurious car segment steals one road pixel
    acc = panoptic_quality(pred, gt, N)
    assert acc.tp[3] == 1 and acc.fp[3] == 1 and acc.fn[3] == 0
    res = finalize(acc)
    assert res.per_class[3] == pytest.approx(2 / 3)


def test_pq_void_overlap_rule():
    gt = np.zeros((4, 4), dtype=np.int64)
    gt[:, :2] = 1000
    pred = np.full((4, 4), 1000)
    pred[:, 2:] = 2000  # building segment lies entirely on gt void
    acc = panoptic_quality(pred, gt, N)
    # road: void pixels drop out of the union, so IoU = 8 / 8.
    assert acc.tp[1] == 1 and acc.iou_sum[1] == pytest.approx(1.0)
    # building: unmatched but > 50 % on void, not a false positive.
    assert acc.fp[2] == 0


def test_pq_half_void_prediction_is_still_a_false_positive():
    gt = np.full((2, 4), 1000)
    gt[:, 3] = 0
    pred = np.full((2, 4), 1000)
    pred[:, 2:] = 2000  # half on void, half on road: not > 50 %
    acc = panoptic_quality(pred, gt, N)
    assert acc.fp[2] == 1


def test_pq_shape_mismatch():
    with pytest.raises(ValueError):
        panoptic_quality(np.zeros((2, 2)), np.zeros((3, 2)), N)


@given(st.integers(0, 2**32 - 1))
def test_pq_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 17, size=2)
    gt = random_panoptic(rng, h, w)
    pred = random_panoptic(rng, h, w) if rng.random() < 0.5 else _perturb(gt, rng)
    expected, per = pq_bruteforce(pred, gt, N)
    if expected is None:
        with pytest.raises(UndefinedMetricError):
            finalize(panoptic_quality(pred, gt, N))
        return
    res = finalize(panoptic_quality(pred, gt, N))
    assert res.pq == pytest.approx(expected, abs=1e-9)
    assert res.per_class.keys() == per.keys()


def _perturb(gt, rng):
    pred = gt.copy()
    n = int(rng.integers(0, gt.size // 3 + 1))
    idx = rng.integers(0, gt.size, size=n)
    flat = pred.ravel()
    flat[idx] = flat[rng.integers(0, gt.size, size=n)]
    return pred


@given(st.integers(0, 2**32 - 1))
def test_pq_accumulator_merge_is_a_commutative_monoid(seed):
    rng = np.random.default_rng(seed)
    accs = [panoptic_quality(random_panoptic(rng, 8, 8), random_panoptic(rng, 8, 8), N) for _ in range(3)]
    a, b, c = accs
    zero = PQAccumulator.zeros(N)
    for lhs, rhs in [((a + b) + c, a + (b + c)), (a + b, b + a), (a + zero, a)]:
        for f in ("tp", "fp", "fn"):
            np.testing.assert_array_equal(getattr(lhs, f), getattr(rhs, f))
    # float addition commutes exactly but only associates up to round-off
    np.testing.assert_array_equal((a + b).iou_sum, (b + a).iou_sum)
    np.testing.assert_array_equal((a + zero).iou_sum, a.iou_sum)
    np.testing.assert_allclose(((a + b) + c).iou_sum, (a + (b + c)).iou_sum, rtol=1e-12, atol=0)
    assert np.all(a.iou_sum <= a.tp + 1e-12)
    assert min(a.tp.min(), a.fp.min(), a.fn.min()) >= 0


def _det(mask, cls=3, score=1.0):
    return InstanceDetection(np.asarray(mask, bool), cls, score)


def test_ap_single_detection_iou_06():
    gt = np.zeros((1, 10), bool)
    gt[0, :6] = True
    det = np.zeros((1, 10), bool)
    det[0, :10] = True  # IoU = 6 / 10
    ap = average_precision([[_det(det)]], [[GroundTruthInstance(gt, 3)]])
    assert ap == pytest.approx(0.3)


def test_ap_perfect_detections():
    rng = np.random.default_rng(1)
    gt = random_panoptic(rng, 16, 16, min_things=2)
    gts, dets = [], []
    for pid in np.unique(gt):
        if pid % 1000:
            gts.append(GroundTruthInstance(gt == pid, pid // 1000))
            dets.append(_det(gt == pid, pid // 1000, float(rng.random()) + 0.1))
    assert average_precision([dets], [gts]) == 1.0


def test_ap_undefined_without_ground_truth():
    with pytest.raises(UndefinedMetricError):
        average_precision([[_det(np.ones((2, 2)))]], [[]])


def test_ap_from_flags_no_detections_is_zero():
    assert ap_from_flags(np.array([]), np.array([], bool), 3) == 0.0


@given(st.integers(0, 2**32 - 1))
def test_ap_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    dets, gts, dets_o, gts_o = random_detection_sets(rng)
    if not any(gts_o):
        with pytest.raises(UndefinedMetricError):
            average_precision(dets, gts)
        return
    assert average_precision(dets, gts) == pytest.approx(ap_oracle(dets_o, gts_o), abs=1e-9)


def test_ap_accumulator_merge_matches_single_pass():
    rng = np.random.default_rng(5)
    dets, gts, _, _ = random_detection_sets(rng)
    while len(dets) < 2 or not any(gts):
        dets, gts, _, _ = random_detection_sets(rng)
    whole = APAccumulator()
    for i, (d, g) in enumerate(zip(dets, gts)):
        whole.update(d, g, f"{i:08d}")
    parts = [APAccumulator().update(d, g, f"{i:08d}") for i, (d, g) in enumerate(zip(dets, gts))]
    merged = parts[1] + parts[0]
    for p in parts[2:]:
        merged = merged + p
    assert finalize_ap(merged) == finalize_ap(whole)


@given(st.integers(0, 2**32 - 1))
def test_metrics_identity_and_range(seed):
    rng = np.random.default_rng(seed)
    gt = random_panoptic(rng, 12, 12, min_things=1)
    report = EvalAccumulator(TABLE).update(gt, gt).report()
    assert report.pq == report.ap == report.miou == 1.0
    pred = random_panoptic(rng, 12, 12)
    other = EvalAccumulator(TABLE).update(pred, gt).report()
    for v in (other.pq, other.ap, other.miou):
        assert 0.0 <= v <= 1.0


def test_eval_accumulator_merge_equals_single_pass():
    rng = np.random.default_rng(3)
    pairs = [(random_panoptic(rng, 10, 10), random_panoptic(rng, 10, 10, min_things=1)) for _ in range(4)]
    whole = EvalAccumulator(TABLE)
    for i, (p, g) in enumerate(pairs):
        whole.update(p, g, image_key=str(i))
    a = EvalAccumulator(TABLE)
    b = EvalAccumulator(TABLE)
    for i, (p, g) in enumerate(pairs):
        (a if i < 2 else b).update(p, g, image_key=str(i))
    r1, r2 = whole.report(), (b + a).report()
    assert (r1.pq, r1.ap, r1.miou) == (r2.pq, r2.ap, r2.miou)


def test_report_text_and_csv():
    gt = random_panoptic(np.random.default_rng(0), 8, 8, min_things=1)
    report = EvalAccumulator(TABLE).update(gt, gt).report()
    text = report.to_text()
    assert "pq = 1.0000000000" in text and "miou = 1.0000000000" in text
    assert "car" in text
    assert report.csv_row(2, "val-fine") == "2,val-fine,1.0000000000,1.0000000000,1.0000000000"
