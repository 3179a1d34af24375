"""scikit-learn style wrappers around the learner, the pseudo-labeler and the loop.

``X`` is always a sequence of (H, W, 3) images and ``y`` a sequence of
panoptic id maps of matching size.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .model.learner import Checkpoint, LearnerConfig, enlarge, finetune, train
from .model.loss import DEFAULT_LAMBDAS
from .model.targets import default_sigma, encode_targets
from .metrics.semantic import ConfusionMatrix, miou
from .postproc import PostprocConfig, panoptic_from_volume
from .tta import NO_AUG, AugSpec, pseudo_label, tta_predict
from .types import ClassTable, split_panoptic
from .validation import check_images, check_is_fitted, check_panoptic_maps


class PanopticLearner(BaseEstimator):
    """Trainable center/offset panoptic network.

    Args:
        class_table: Classes of the label maps (ids 1..K).
        capacity: Base channel count.
        depth: Number of residual blocks.
        steps: Optimisation steps used by ``fit``.
        random_state: Seed for initialisation, shuffling and augmentation.
        aug: Test-time augmentation used by ``predict``.
    """

    def __init__(self, class_table: ClassTable, capacity=8, depth=2, survival_prob=0.8,
                 lambdas=DEFAULT_LAMBDAS, base_lr=0.01, optimizer="adam", steps=1000, batch_size=4,
                 sigma=None, random_state=0, aug: AugSpec = NO_AUG,
                 postproc: PostprocConfig = PostprocConfig()):
        self.class_table = class_table
        self.capacity = capacity
        self.depth = depth
        self.survival_prob = survival_prob
        self.lambdas = lambdas
        self.base_lr = base_lr
        self.optimizer = optimizer
        self.steps = steps
        self.batch_size = batch_size
        self.sigma = sigma
        self.random_state = random_state
        self.aug = aug
        self.postproc = postproc

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(num_logits=self.class_table.num_logits, capacity=self.capacity, depth=self.depth,
                             survival_prob=self.survival_prob, lambdas=tuple(self.lambdas),
                             base_lr=self.base_lr, optimizer=self.optimizer, steps=self.steps,
                             batch_size=self.batch_size, rng_seed=int(self.random_state))

    def _pairs(self, X, y):
        images = check_images(X)
        maps = check_panoptic_maps(y, images, self.class_table)
        sigma = self.sigma if self.sigma is not None else default_sigma(images[0].shape[0])
        return [(im, encode_targets(m, sigma, self.class_table)) for im, m in zip(images, maps)]

    def fit(self, X, y, init: Optional[Checkpoint] = None):
        self.checkpoint_ = train(self._pairs(X, y), self.learner_config(), init=init,
                                 provenance=f"{type(self).__name__}.fit")
        self.loss_curve_ = list(self.checkpoint_.trace)
        return self

    def finetune(self, X, y, **overrides):
        """Continue training the fitted network on ``(X, y)``."""
        check_is_fitted(self, "checkpoint_")
        self.checkpoint_ = finetune(self.checkpoint_, self._pairs(X, y), **overrides)
        return self

    def predict_scores(self, X):
        """Fused softmax, heatmap and offsets per image."""
        check_is_fitted(self, "checkpoint_")
        return [tta_predict(im, self.checkpoint_, self.aug) for im in check_images(X)]

    def predict(self, X):
        out = []
        for fused in self.predict_scores(X):
            pan, _ = panoptic_from_volume(fused.semantic_probs, fused.center_heatmap, fused.offsets,
                                          self.class_table, self.postproc)
            out.append(pan)
        return out

    def score(self, X, y) -> float:
        """Mean IoU of ``predict(X)`` against ``y``."""
        cm = ConfusionMatrix(self.class_table.num_logits)
        for pred, gt in zip(self.predict(X), y):
            cm.update(split_panoptic(np.asarray(gt))[0], split_panoptic(pred)[0])
        return miou(cm)[1]


class PseudoLabeler(BaseEstimator, TransformerMixin):
    """Turns unlabeled images into hard panoptic labels with a fixed teacher.

    ``fit`` is a no-op; the teacher checkpoint is a constructor parameter.
    """

    def __init__(self, checkpoint: Checkpoint, class_table: ClassTable, aug: AugSpec = AugSpec(),
                 postproc: PostprocConfig = PostprocConfig()):
        self.checkpoint = checkpoint
        self.class_table = class_table
        self.aug = aug
        self.postproc = postproc

    def fit(self, X=None, y=None):
        return self

    def transform(self, X, ego_void: Optional[Sequence[np.ndarray]] = None):
        images = check_images(X)
        if ego_void is None:
            ego_void = [None] * len(images)
        return [pseudo_label(im, self.checkpoint, self.aug, self.postproc, self.class_table, ego)
                for im, ego in zip(images, ego_void)]


class NaiveStudent(BaseEstimator):
    """In-memory teacher -> pseudo-label -> student -> fine-tune loop.

    ``fit(X_labeled, y_labeled, X_unlabeled)`` keeps every fine-tuned student
    in ``iterations_``; the last one predicts. The file-based, resumable
    version with provenance and metric history lives in the orchestrator.
    """

    def __init__(self, base: PanopticLearner, iterations=2, enlarge_factors=(1.5, 1.0), student_steps=2000,
                 pseudo_aug: AugSpec = AugSpec(), split_policy="pseudo-only"):
        self.base = base
        self.iterations = iterations
        self.enlarge_factors = enlarge_factors
        self.student_steps = student_steps
        self.pseudo_aug = pseudo_aug
        self.split_policy = split_policy

    def fit(self, X, y, X_unlabeled):
        if self.split_policy not in ("pseudo-only", "mixed"):
            raise ValueError(f"split_policy must be 'pseudo-only' or 'mixed', got {self.split_policy!r}")
        teacher = PanopticLearner(**self.base.get_params(deep=False)).fit(X, y)
        labeled = teacher._pairs(X, y)
        unlabeled = check_images(X_unlabeled)
        self.iterations_ = [teacher.checkpoint_]
        ckpt = teacher.checkpoint_
        for k in range(1, self.iterations + 1):
            labeler = PseudoLabeler(ckpt, self.base.class_table, self.pseudo_aug, self.base.postproc)
            data = teacher._pairs(unlabeled, labeler.transform(unlabeled))
            if self.split_policy == "mixed":
                data = data + labeled
            factor = self.enlarge_factors[min(k - 1, len(self.enlarge_factors) - 1)] if self.enlarge_factors else 1.0
            cfg = enlarge(ckpt.config, factor).replace(steps=self.student_steps,
                                                      rng_seed=int(self.base.random_state) + k)
            student = train(data, cfg, provenance=f"student-it{k}")
            ckpt = finetune(student, labeled, provenance=f"finetune-it{k}")
            self.iterations_.append(ckpt)
        self.checkpoint_ = ckpt
        return self

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        est = PanopticLearner(**self.base.get_params(deep=False))
        est.checkpoint_ = self.checkpoint_
        return est.predict(X)
