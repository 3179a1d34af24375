"""Iterative teacher -> pseudo-label -> student -> fine-tune loop.

Directory layout of an experiment::

    out/config.json            resolved ExperimentConfig
    out/manifest.tsv           manifest snapshot (paths relative to the data root)
    out/ego/<seq>.evmk         propagated ego-car masks
    out/pseudo/v{k}/<seq>/<frame>.lmap
    out/checkpoints/teacher-it0.nsck, student-it{k}-pseudo.nsck, student-it{k}.nsck
    out/history.csv            iteration,split,pq,ap,miou
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset.lmap import load_lmap, load_mask, save_lmap
from .dataset.manifest import DatasetManifest, FrameRecord
from .dataset.splits import propagate_ego_car, sample_fraction
from .dataset.synth import load_image
from .metrics.evaluate import evaluate_split
from .metrics.report import CSV_HEADER, MetricReport
from .model.learner import (Checkpoint, ConfigError, LearnerConfig, enlarge, finetune,
                            save_checkpoint, train)
from .model.loss import DEFAULT_LAMBDAS
from .model.targets import default_sigma, encode_targets
from .postproc import PostprocConfig
from .tta import DEFAULT_SCALES, NO_AUG, AugSpec, pseudo_label

logger = logging.getLogger(__name__)

SPLIT_POLICIES = ("pseudo-only", "labeled-only", "mixed")


class InvariantError(RuntimeError):
    """An experiment-hygiene invariant was violated."""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    iterations: int = 2
    enlarge_factors: Tuple[float, ...] = (1.5, 1.0)
    init_student_from_previous: bool = False
    use_tta: bool = True
    use_ego_void: bool = True
    ego_mode: str = "all-void"
    labeled_fraction: float = 1.0
    pseudo_fraction: float = 1.0
    split_policy: str = "pseudo-only"
    teacher_uses_val_fine: bool = False
    labeled_split: str = "train-fine"
    unlabeled_split: str = "train-sequence"
    eval_split: str = "val-fine"
    # learner
    capacity: int = 8
    depth: int = 2
    survival_prob: float = 0.8
    lambdas: Tuple[float, float, float] = DEFAULT_LAMBDAS
    optimizer: str = "adam"
    base_lr: float = 0.01
    batch_size: int = 4
    teacher_steps: int = 1000
    student_steps: int = 2000
    finetune_steps: Optional[int] = None
    finetune_lr: Optional[float] = None
    sigma: Optional[float] = None
    # pseudo-labels / evaluation
    tta_scales: Tuple[float, ...] = DEFAULT_SCALES
    tta_flip: bool = True
    fuse_semantic_only: bool = False
    center_threshold: float = 0.1
    nms_window: int = 7
    stuff_area_threshold: Optional[float] = None
    jobs: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.split_policy not in SPLIT_POLICIES:
            raise ConfigError(f"split_policy must be one of {SPLIT_POLICIES}")
        for name in ("labeled_fraction", "pseudo_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if any(f < 1 for f in self.enlarge_factors):
            raise ConfigError("enlarge factors must be >= 1")
        object.__setattr__(self, "enlarge_factors", tuple(float(f) for f in self.enlarge_factors))
        object.__setattr__(self, "lambdas", tuple(float(f) for f in self.lambdas))
        object.__setattr__(self, "tta_scales", tuple(float(f) for f in self.tta_scales))

    # -- derived configs ------------------------------------------------------

    def enlarge_factor(self, iteration: int) -> float:
        if not self.enlarge_factors:
            return 1.0
        return self.enlarge_factors[min(iteration - 1, len(self.enlarge_factors) - 1)]

    def teacher_config(self, num_logits: int) -> LearnerConfig:
        return LearnerConfig(
            num_logits=num_logits, capacity=self.capacity, depth=self.depth,
            survival_prob=self.survival_prob, lambdas=self.lambdas, base_lr=self.base_lr,
            steps=self.teacher_steps, batch_size=self.batch_size, rng_seed=self.stage_seed(0, 1),
            optimizer=self.optimizer)

    def stage_seed(self, iteration: int, stage: int) -> int:
        """Independent 63-bit seed per (iteration, stage)."""
        ss = np.random.SeedSequence([self.seed, iteration, stage])
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def aug_spec(self) -> AugSpec:
        if not self.use_tta:
            return NO_AUG
        return AugSpec(self.tta_scales, self.tta_flip, self.fuse_semantic_only)

    def postproc(self) -> PostprocConfig:
        return PostprocConfig(center_threshold=self.center_threshold, nms_window=self.nms_window,
                              stuff_area_threshold=self.stuff_area_threshold)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("enlarge_factors", "lambdas", "tta_scales"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class IterationState:
    iteration: int
    teacher: Checkpoint
    student: Optional[Checkpoint] = None
    pseudo_version: Optional[str] = None
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)


# -- data loading -------------------------------------------------------------

def load_training_pairs(manifest: DatasetManifest, frames: Sequence[FrameRecord], sigma: float,
                        label_root: Optional[Path] = None, label_paths: Optional[Dict[str, str]] = None):
    """(image, TrainingTargets) pairs for frames with human or pseudo labels."""
    pairs = []
    for f in frames:
        if label_paths is not None:
            ids = load_lmap(label_paths[f.key])
        else:
            ids = load_lmap(manifest.path(f.label_path))
        pairs.append((load_image(manifest.path(f.image_path)),
                      encode_targets(ids, sigma, manifest.class_table)))
    return pairs


@dataclass
class ExperimentPlan:
    """Frame sets of one experiment, fixed before any training happens."""

    manifest: DatasetManifest
    labeled: List[FrameRecord]
    teacher_labeled: List[FrameRecord]
    unlabeled: List[FrameRecord]
    eval_keys: frozenset

    @classmethod
    def build(cls, config: ExperimentConfig, manifest: DatasetManifest) -> "ExperimentPlan":
        labeled = sample_fraction(manifest, config.labeled_split, "labeled", config.labeled_fraction,
                                  config.stage_seed(0, 10)).frames
        pseudo = sample_fraction(manifest, config.unlabeled_split, "pseudo", config.pseudo_fraction,
                                 config.stage_seed(0, 11)).frames
        extra = [f for f in manifest.frames if "train-extra" in f.split_tags and not f.labeled]
        eval_keys = frozenset(f.key for f in manifest.split(config.eval_split))
        unlabeled = [f for f in pseudo if not f.labeled] + [f for f in extra if f not in pseudo]
        unlabeled = [f for f in unlabeled if f.key not in eval_keys]
        teacher_labeled = list(labeled)
        if config.teacher_uses_val_fine:
            teacher_labeled += [f for f in manifest.split("val-fine") if f.labeled]
        plan = cls(manifest, labeled, teacher_labeled, unlabeled, eval_keys)
        plan.check_student_hygiene(labeled + unlabeled)
        return plan

    def check_student_hygiene(self, frames: Sequence[FrameRecord]) -> None:
        leaked = [f.key for f in frames if f.key in self.eval_keys]
        if leaked:
            raise InvariantError(f"evaluation frames reached student training: {leaked[:3]}")


# -- pseudo labels ------------------------------------------------------------

def _pseudo_label_frame(args):
    image_path, ego_path, out_path, checkpoint, aug, postproc, class_table = args
    image = load_image(image_path)
    ego = load_mask(ego_path) if ego_path is not None else None
    pan = pseudo_label(image, checkpoint, aug, postproc, class_table, ego)
    save_lmap(pan, out_path)
    return out_path


def generate_pseudo_labels(manifest: DatasetManifest, frames: Sequence[FrameRecord], checkpoint: Checkpoint,
                           aug: AugSpec, postproc: PostprocConfig, out_dir: Path,
                           use_ego_void: bool, jobs: int = 1) -> Dict[str, str]:
    """Write one LMAP per frame under ``out_dir``; returns ``{frame key: path}``."""
    tasks, paths = [], {}
    for f in frames:
        dest = out_dir / f.sequence_id / f"{f.frame_index:03d}.lmap"
        dest.parent.mkdir(parents=True, exist_ok=True)
        ego = manifest.path(f.ego_void_path) if (use_ego_void and f.ego_void_path) else None
        tasks.append((manifest.path(f.image_path), ego, dest, checkpoint, aug, postproc,
                      manifest.class_table))
        paths[f.key] = str(dest)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_pseudo_label_frame, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        for t in tasks:
            _pseudo_label_frame(t)
    return paths


# -- the loop -----------------------------------------------------------------

class Experiment:
    """Holds everything one run needs; ``run()`` executes the whole loop."""

    def __init__(self, config: ExperimentConfig, manifest: DatasetManifest, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.source_manifest = manifest
        self.sigma = config.sigma if config.sigma is not None else default_sigma(manifest.image_size[0])
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        self.manifest = self._prepare_manifest(manifest)
        self.plan = ExperimentPlan.build(config, self.manifest)
        self.reports: Dict[int, MetricReport] = {}
        self._labeled_pairs = None

    def _prepare_manifest(self, manifest: DatasetManifest) -> DatasetManifest:
        (self.out / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        manifest.save(self.out / "manifest.tsv")
        if not self.config.use_ego_void:
            return propagate_ego_car(manifest, enabled=False)
        ego_root = self.out / "ego"
        prepared = propagate_ego_car(manifest, mode=self.config.ego_mode,
                                     out_subdir=os.path.relpath(ego_root, manifest.root))
        return prepared

    @property
    def labeled_pairs(self):
        if self._labeled_pairs is None:
            self._labeled_pairs = load_training_pairs(self.manifest, self.plan.labeled, self.sigma)
        return self._labeled_pairs

    def _data_tag(self, frames, what: str) -> str:
        return f"{what}[n={len(frames)}]"

    def evaluate(self, checkpoint: Checkpoint) -> MetricReport:
        return evaluate_split(self.manifest, self.config.eval_split, checkpoint, self.config.postproc())

    def train_teacher(self) -> IterationState:
        """Step 1: supervised teacher on the labeled frames."""
        cfg = self.config
        teacher_cfg = cfg.teacher_config(self.manifest.class_table.num_logits)
        if cfg.teacher_uses_val_fine:
            pairs = load_training_pairs(self.manifest, self.plan.teacher_labeled, self.sigma)
        else:
            pairs = self.labeled_pairs
        prov = (f"teacher(it0; init=scratch; data={cfg.labeled_split}"
                f"[fraction={cfg.labeled_fraction}, n={len(pairs)}]"
                f"{'; +val-fine' if cfg.teacher_uses_val_fine else ''}; capacity={teacher_cfg.capacity})")
        teacher = train(pairs, teacher_cfg, provenance=prov)
        save_checkpoint(teacher, self.out / "checkpoints" / "teacher-it0.nsck")
        report = self.evaluate(teacher)
        logger.info("teacher: %d steps, %s", teacher.step, _summary(report))
        self.reports[0] = report
        state = IterationState(0, teacher, history=[(0, report.pq, report.ap, report.miou)])
        self._write_history(state)
        return state

    def run_iteration(self, state: IterationState) -> IterationState:
        """Steps 2-5 for iteration ``state.iteration + 1``."""
        cfg = self.config
        k = state.iteration + 1
        policy = cfg.split_policy
        pseudo_pairs = []
        pseudo_version = state.pseudo_version
        aug = cfg.aug_spec()
        if policy != "labeled-only":
            if not self.plan.unlabeled:
                raise ConfigError(f"split policy {policy!r} needs unlabeled frames, none in scope")
            pseudo_version = f"v{k}"
            paths = generate_pseudo_labels(
                self.manifest, self.plan.unlabeled, state.teacher, aug, cfg.postproc(),
                self.out / "pseudo" / pseudo_version, cfg.use_ego_void, cfg.jobs)
            pseudo_pairs = load_training_pairs(self.manifest, self.plan.unlabeled, self.sigma,
                                               label_paths=paths)
            logger.info("iteration %d: %d pseudo-labels written to pseudo/%s", k, len(paths), pseudo_version)

        if policy == "pseudo-only":
            data, data_tag = pseudo_pairs, f"pseudo/{pseudo_version}[n={len(pseudo_pairs)}]"
        elif policy == "mixed":
            data = pseudo_pairs + self.labeled_pairs
            data_tag = f"pseudo/{pseudo_version}[n={len(pseudo_pairs)}]+{cfg.labeled_split}[n={len(self.labeled_pairs)}]"
        else:
            data, data_tag = self.labeled_pairs, f"{cfg.labeled_split}[n={len(self.labeled_pairs)}]"

        base_cfg = state.teacher.config
        student_cfg = enlarge(base_cfg, cfg.enlarge_factor(k)).replace(
            steps=cfg.student_steps, rng_seed=cfg.stage_seed(k, 3))
        init = None
        init_tag = "scratch"
        if cfg.init_student_from_previous and k > 1:
            if student_cfg.capacity != base_cfg.capacity:
                raise ConfigError("cannot initialise an enlarged student from the previous checkpoint")
            init, init_tag = state.teacher, f"student-it{k - 1}"
        gen = (f"tta(scales={list(aug.scales)}, flip={aug.flip})" if policy != "labeled-only" else "none")
        teacher_name = "teacher-it0" if k == 1 else f"student-it{k - 1}"
        prov = (f"student(it{k}; init={init_tag}; teacher={teacher_name}; "
                f"data={data_tag}; pseudo_gen={gen}; ego_void={cfg.use_ego_void}; capacity={student_cfg.capacity})")
        student = train(data, student_cfg, init=init, provenance=prov)
        save_checkpoint(student, self.out / "checkpoints" / f"student-it{k}-pseudo.nsck")
        logger.info("iteration %d: student trained (capacity %d, %d steps)", k, student_cfg.capacity,
                    student_cfg.steps)

        ft_overrides = {"rng_seed": cfg.stage_seed(k, 4)}
        if cfg.finetune_steps is not None:
            ft_overrides["steps"] = cfg.finetune_steps
        if cfg.finetune_lr is not None:
            ft_overrides["base_lr"] = cfg.finetune_lr
        tuned = finetune(student, self.labeled_pairs,
                         provenance=f"finetune(it{k}; data={cfg.labeled_split}[n={len(self.labeled_pairs)}])",
                         **ft_overrides)
        save_checkpoint(tuned, self.out / "checkpoints" / f"student-it{k}.nsck")

        report = self.evaluate(tuned)
        logger.info("iteration %d: fine-tuned student %s", k, _summary(report))
        self.reports[k] = report
        new_state = IterationState(k, tuned, student, pseudo_version,
                                   state.history + [(k, report.pq, report.ap, report.miou)])
        self._write_history(new_state)
        return new_state

    def _write_history(self, state: IterationState) -> None:
        lines = [CSV_HEADER]
        for it, pq, ap, miou in state.history:
            lines.append(f"{it},{self.config.eval_split},{pq:.10f},{ap:.10f},{miou:.10f}")
        (self.out / "history.csv").write_text("\n".join(lines) + "\n")

    def run(self) -> IterationState:
        state = self.train_teacher()
        for _ in range(self.config.iterations):
            state = self.run_iteration(state)
        return state


def _summary(report: MetricReport) -> str:
    return f"pq={report.pq:.4f} ap={report.ap:.4f} miou={report.miou:.4f}"


def run_experiment(config: ExperimentConfig, manifest: DatasetManifest, out_dir) -> IterationState:
    """Train the initial teacher, then run ``config.iterations`` iterations."""
    return Experiment(config, manifest, out_dir).run()


def run_iteration(state: IterationState, config: ExperimentConfig, manifest: DatasetManifest,
                  out_dir) -> IterationState:
    """One teacher -> student -> fine-tune round on top of ``state``."""
    return Experiment(config, manifest, out_dir).run_iteration(state)


def read_history(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a history file")
    rows = []
    for line in lines[1:]:
        it, split, pq, ap, miou = line.split(",")
        rows.append({"iteration": int(it), "split": split, "pq": float(pq), "ap": float(ap), "miou": float(miou)})
    return rows
