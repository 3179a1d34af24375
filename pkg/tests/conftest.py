import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from naive_student.types import ClassInfo, ClassTable

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TABLE = ClassTable([ClassInfo(1, "road", "stuff"), ClassInfo(2, "building", "stuff"),
                    ClassInfo(3, "car", "thing"), ClassInfo(4, "person", "thing")])


@pytest.fixture
def table():
    return TABLE


def random_panoptic(rng, h, w, table=TABLE, max_instances=3, void_prob=0.3, min_separation=None,
                    min_things=0):
    """A valid panoptic map: stuff blocks, optional void patch, rectangular things.

    With ``min_separation`` the mass centers of all thing instances are at
    least that many pixels apart (Chebyshev), as needed for exact center
    recovery after non-maximum suppression.
    """
    stuff = table.stuff_ids
    things = table.thing_ids
    sem = np.full((h, w), rng.choice(stuff), dtype=np.int64)
    for _ in range(int(rng.integers(0, 4))):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        sem[r0:r0 + rng.integers(1, h + 1), c0:c0 + rng.integers(1, w + 1)] = rng.choice(stuff)
    if rng.random() < void_prob:
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        sem[r0:r0 + rng.integers(1, 5), c0:c0 + rng.integers(1, 5)] = 0
    inst = np.zeros((h, w), dtype=np.int64)
    n_inst = int(rng.integers(min_things, max_instances + 1)) if things else 0
    placed = []
    counters = {}
    for _ in range(50):
        if len(placed) >= n_inst:
            break
        hh, ww = int(rng.integers(1, max(2, h // 3) + 1)), int(rng.integers(1, max(2, w // 3) + 1))
        r0, c0 = int(rng.integers(0, h - hh + 1)), int(rng.integers(0, w - ww + 1))
        box = np.zeros((h, w), dtype=bool)
        box[r0:r0 + hh, c0:c0 + ww] = True
        if any((box & m).any() for m, _ in placed):
            continue
        center = (r0 + (hh - 1) / 2, c0 + (ww - 1) / 2)
        if min_separation is not None and any(
                max(abs(center[0] - c[0]), abs(center[1] - c[1])) < min_separation for _, c in placed):
            continue
        cls = int(rng.choice(things))
        counters[cls] = counters.get(cls, 0) + 1
        sem[box] = cls
        inst[box] = counters[cls]
        placed.append((box, center))
    return (sem * 1000 + inst).astype(np.int32)


def same_up_to_renumbering(a, b):
    """True iff the maps have equal semantics and a bijection between segments."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a // 1000, b // 1000):
        return False
    pairs = set(zip(a.ravel().tolist(), b.ravel().tolist()))
    left = {p[0] for p in pairs}
    right = {p[1] for p in pairs}
    return len(pairs) == len(left) == len(right)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 3+1 sequence, 4-frame synthetic dataset at 32x48; returns (root, manifest, gt)."""
    from naive_student.dataset.synth import SynthConfig, synth_generate
    cfg = SynthConfig(num_sequences=3, num_val_sequences=1, frames_per_sequence=4, labeled_index=2,
                      image_size=(32, 48), instances_per_sequence=(2, 4), rng_seed=5)
    root = tmp_path_factory.mktemp("tiny_synth")
    manifest, gt = synth_generate(cfg, root)
    return root, manifest, gt


TINY_RUN = dict(capacity=2, depth=1, batch_size=2, teacher_steps=4, student_steps=4, finetune_steps=2,
                tta_scales=(1.0, 1.5))


def random_detection_sets(rng):
    """Tiny random detection and ground-truth sets, as package objects and plain tuples."""
    from naive_student.metrics.instance import GroundTruthInstance, InstanceDetection

    images = int(rng.integers(1, 3))
    dets_all, gts_all, dets_o, gts_o = [], [], [], []
    for _ in range(images):
        h, w = 4, 5
        gt = random_panoptic(rng, h, w, max_instances=3)
        gts = [(gt == pid, int(pid // 1000)) for pid in np.unique(gt) if pid % 1000]
        dets = []
        for _ in range(int(rng.integers(0, 4))):
            m = rng.random((h, w)) < rng.uniform(0.1, 0.6)
            if gts and rng.random() < 0.7:
                base = gts[int(rng.integers(len(gts)))][0]
                m = base ^ (rng.random((h, w)) < 0.15)
            if not m.any():
                m[0, 0] = True
            cls = int(rng.choice(TABLE.thing_ids))
            dets.append((m, cls, float(np.round(rng.random(), 1))))
        dets_all.append([InstanceDetection(np.asarray(m, bool), c, s) for m, c, s in dets])
        gts_all.append([GroundTruthInstance(m, c) for m, c in gts])
        dets_o.append(dets)
        gts_o.append(gts)
    return dets_all, gts_all, dets_o, gts_o


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
