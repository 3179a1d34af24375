import json

import numpy as np
import pytest

from conftest import TINY_RUN
from naive_student.dataset.lmap import load_lmap
from naive_student.model.learner import ConfigError, load_checkpoint
from naive_student.orchestrator import (Experiment, ExperimentConfig, ExperimentPlan, InvariantError,
                                        read_history, run_experiment)

CFG = ExperimentConfig(seed=11, **TINY_RUN)


@pytest.fixture(scope="module")
def full_run(tiny_dataset, tmp_path_factory):
    _, manifest, _ = tiny_dataset
    out = tmp_path_factory.mktemp("run")
    return out, run_experiment(CFG, manifest, out)


def test_run_layout_and_history(full_run, tiny_dataset):
    out, state = full_run
    _, manifest, _ = tiny_dataset
    rows = read_history(out / "history.csv")
    assert [r["iteration"] for r in rows] == [0, 1, 2]
    assert all(r["split"] == "val-fine" for r in rows)
    assert state.iteration == 2 and state.pseudo_version == "v2"
    unlabeled = [f for f in manifest.split("train-sequence") if not f.labeled]
    for v in ("v1", "v2"):
        files = sorted((out / "pseudo" / v).rglob("*.lmap"))
        assert len(files) == len(unlabeled)
    for name in ("teacher-it0", "student-it1-pseudo", "student-it1", "student-it2-pseudo", "student-it2"):
        assert (out / "checkpoints" / f"{name}.nsck").exists()
    assert ExperimentConfig.from_dict(json.loads((out / "config.json").read_text())) == CFG


def test_student_capacity_and_provenance(full_run):
    out, _ = full_run
    teacher = load_checkpoint(out / "checkpoints" / "teacher-it0.nsck")
    s1 = load_checkpoint(out / "checkpoints" / "student-it1.nsck")
    s2 = load_checkpoint(out / "checkpoints" / "student-it2.nsck")
    assert (teacher.config.capacity, s1.config.capacity, s2.config.capacity) == (2, 3, 3)
    assert "teacher=teacher-it0" in s1.provenance and "teacher=student-it1" in s2.provenance
    assert "pseudo/v1" in s1.provenance and "finetune(it1" in s1.provenance
    assert "init=scratch" in s2.provenance


def test_pseudo_labels_respect_ego_void(full_run, tiny_dataset):
    out, _ = full_run
    root, manifest, gt = tiny_dataset
    for f in manifest.split("train-sequence"):
        if f.labeled:
            continue
        pl = load_lmap(out / "pseudo" / "v1" / f.sequence_id / f"{f.frame_index:03d}.lmap")
        labeled = [g for g in manifest.sequences()[f.sequence_id] if g.labeled][0]
        assert not pl[gt[labeled.key] == 0].any()


def test_pipeline_is_deterministic(full_run, tiny_dataset, tmp_path):
    out, _ = full_run
    _, manifest, _ = tiny_dataset
    run_experiment(CFG, manifest, tmp_path)
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    for rel in files:
        assert (out / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_labeled_only_never_pseudo_labels(tiny_dataset, tmp_path):
    _, manifest, _ = tiny_dataset
    state = run_experiment(CFG.replace(split_policy="labeled-only", iterations=1), manifest, tmp_path)
    assert not (tmp_path / "pseudo").exists()
    assert "data=train-fine" in state.student.provenance


def test_mixed_policy_and_fractions(tiny_dataset, tmp_path):
    _, manifest, _ = tiny_dataset
    cfg = CFG.replace(split_policy="mixed", iterations=1, pseudo_fraction=0.5, labeled_fraction=0.5,
                      use_tta=False, use_ego_void=False)
    state = run_experiment(cfg, manifest, tmp_path)
    n = len(list((tmp_path / "pseudo" / "v1").rglob("*.lmap")))
    assert n == 2 * 3  # ceil(0.5 * 3) sequences, 3 unlabeled frames each
    assert "+train-fine[n=2]" in state.student.provenance
    assert "flip=False" in state.student.provenance and not (tmp_path / "ego").exists()


def test_plan_excludes_eval_frames(tiny_dataset):
    _, manifest, _ = tiny_dataset
    leaky = manifest.with_frames(f.replace(split_tags=f.split_tags | {"train-extra"})
                                 if "val-sequence" in f.split_tags else f for f in manifest.frames)
    plan = ExperimentPlan.build(CFG, leaky)
    assert not {f.key for f in plan.unlabeled} & plan.eval_keys
    assert len(plan.unlabeled) == 3 * 3 + 3  # train sequences plus unlabeled val-sequence extras
    with pytest.raises(InvariantError):
        plan.check_student_hygiene(manifest.split("val-fine"))


def test_teacher_may_use_val_fine(tiny_dataset, tmp_path):
    _, manifest, _ = tiny_dataset
    exp = Experiment(CFG.replace(teacher_uses_val_fine=True, iterations=1), manifest, tmp_path)
    assert len(exp.plan.teacher_labeled) == 4 and len(exp.plan.labeled) == 3
    state = exp.train_teacher()
    assert "+val-fine" in state.teacher.provenance


def test_init_student_from_previous_needs_equal_capacity(tiny_dataset, tmp_path):
    _, manifest, _ = tiny_dataset
    cfg = CFG.replace(init_student_from_previous=True, enlarge_factors=(1.0,))
    state = run_experiment(cfg, manifest, tmp_path)
    assert "init=student-it1" in state.student.provenance
    bad = CFG.replace(init_student_from_previous=True, enlarge_factors=(1.0, 2.0))
    with pytest.raises(ConfigError):
        run_experiment(bad, manifest, tmp_path / "bad")


def test_config_validation_and_seeds():
    with pytest.raises(ConfigError):
        ExperimentConfig(seed=0, iterations=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(seed=0, split_policy="both")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 0, "colour": "red"})
    seeds = {CFG.stage_seed(i, s) for i in range(3) for s in range(5)}
    assert len(seeds) == 15 and all(0 <= s < 2**63 for s in seeds)
    assert CFG.enlarge_factor(1) == 1.5 and CFG.enlarge_factor(5) == 1.0
    assert ExperimentConfig(seed=0, use_tta=False).aug_spec().passes() == [(1.0, False)]


def test_read_history_rejects_garbage(tmp_path):
    (tmp_path / "h.csv").write_text("nope\n")
    with pytest.raises(ValueError):
        read_history(tmp_path / "h.csv")
