"""Learner configuration, checkpoints, inference and gradient-descent training."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..imaging import resize_bilinear, resize_nearest, scaled_size
from ..types import PredictionVolume, TrainingTargets
from . import network
from .loss import DEFAULT_LAMBDAS, loss_and_output_grad
from .network import ShapeError


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


CHECKPOINT_MAGIC = b"NSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LearnerConfig:
    num_logits: int
    capacity: int = 8
    depth: int = 2
    survival_prob: float = 0.8
    lambdas: Tuple[float, float, float] = DEFAULT_LAMBDAS
    base_lr: float = 0.01
    poly_power: float = 0.9
    steps: int = 1000
    batch_size: int = 4
    rng_seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    scale_range: Tuple[float, float] = (0.75, 1.25)
    flip: bool = True
    clip_norm: Optional[float] = 10.0

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {self.capacity}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if not 0.0 < self.survival_prob <= 1.0:
            raise ConfigError(f"survival_prob must be in (0, 1], got {self.survival_prob}")
        if self.num_logits < 2:
            raise ConfigError("need at least one class besides void")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @property
    def parameter_count(self) -> int:
        return network.parameter_count(self.capacity, self.depth, self.num_logits)

    def replace(self, **changes) -> "LearnerConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LearnerConfig":
        data = json.loads(text)
        data["lambdas"] = tuple(data["lambdas"])
        data["scale_range"] = tuple(data["scale_range"])
        return cls(**data)


@dataclass
class Checkpoint:
    config: LearnerConfig
    parameters: np.ndarray
    step: int = 0
    provenance: str = ""
    trace: List[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters, dtype=np.float64)
        if self.parameters.shape != (self.config.parameter_count,):
            raise ShapeError(f"config expects {self.config.parameter_count} parameters, "
                             f"checkpoint has {self.parameters.size}")

    def params(self):
        return network.unflatten(self.parameters, self.config.capacity, self.config.depth,
                                 self.config.num_logits)


def init_checkpoint(config: LearnerConfig, provenance: str = "init") -> Checkpoint:
    """Fresh He-initialised parameters drawn from the config's seed."""
    init_ss, _, _, _ = np.random.SeedSequence(config.rng_seed).spawn(4)
    flat = network.init_parameters(config.capacity, config.depth, config.num_logits,
                                   np.random.default_rng(init_ss))
    return Checkpoint(config, flat, 0, provenance)


# -- checkpoint files ---------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, destination) -> None:
    cfg = ckpt.config.to_json().encode("utf-8")
    prov = ckpt.provenance.encode("utf-8")
    with open(destination, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(prov)) + prov)
        fh.write(struct.pack("<QQ", ckpt.step, ckpt.parameters.size))
        fh.write(ckpt.parameters.astype("<f8").tobytes())


def load_checkpoint(source) -> Checkpoint:
    data = Path(source).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 5 or data[4] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{source}: not an NSCK v{CHECKPOINT_VERSION} checkpoint")
    pos = 5
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        cfg = LearnerConfig.from_json(data[pos + 4:pos + 4 + n].decode("utf-8"))
        pos += 4 + n
        (n,) = struct.unpack_from("<I", data, pos)
        prov = data[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        step, count = struct.unpack_from("<QQ", data, pos)
        pos += 16
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{source}: corrupt header") from exc
    if len(data) - pos != 8 * count:
        raise CheckpointFormatError(f"{source}: expected {count} parameters")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Checkpoint(cfg, params, int(step), prov)


# -- inference ----------------------------------------------------------------

def forward(image: np.ndarray, checkpoint: Checkpoint, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> PredictionVolume:
    """Predict a :class:`PredictionVolume` for one (H, W, 3) image."""
    return forward_many(np.asarray(image)[None], checkpoint, training, rng)[0]


def forward_many(images: np.ndarray, checkpoint: Checkpoint, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> List[PredictionVolume]:
    cfg = checkpoint.config
    x = network.normalize_images(images)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {x.shape}")
    if training:
        keep = network.sample_keep(cfg.depth, cfg.survival_prob, rng)
    else:
        keep = network.inference_keep(cfg.depth, cfg.survival_prob)
    out, _ = network.forward_batch(x, checkpoint.params(), cfg.depth, keep)
    return [network.to_volume(o) for o in out]


def loss_and_gradient(parameters: np.ndarray, config: LearnerConfig, images: np.ndarray,
                      targets: Sequence[TrainingTargets], keep: Optional[np.ndarray] = None,
                      lambdas=None):
    """Total loss, per-term breakdown and analytic gradient w.r.t. all parameters.

    ``keep`` fixes the residual-block multipliers; by default the
    deterministic inference multipliers are used.
    """
    lambdas = config.lambdas if lambdas is None else lambdas
    if keep is None:
        keep = network.inference_keep(config.depth, config.survival_prob)
    params = network.unflatten(parameters, config.capacity, config.depth, config.num_logits)
    x = network.normalize_images(images)
    out, cache = network.forward_batch(x, params, config.depth, keep, need_cache=True)
    total, breakdown, dout = loss_and_output_grad(out, targets, lambdas)
    grad = np.zeros_like(parameters)
    if np.any(dout):
        network.backward_batch(dout, cache, params,
                               network.unflatten(grad, config.capacity, config.depth,
                                                 config.num_logits), config.depth)
    return total, breakdown, grad


# -- training -----------------------------------------------------------------

def poly_lr(base_lr: float, step: int, steps: int, power: float) -> float:
    return base_lr * (1.0 - step / steps) ** power


def _augment_targets(t: TrainingTargets, size, flip: bool) -> TrainingTargets:
    h, w = t.shape
    if (h, w) != tuple(size):
        scale_r = size[0] / h
        scale_c = size[1] / w
        off = resize_nearest(t.offsets, size) * np.array([scale_r, scale_c])
        t = TrainingTargets(resize_nearest(t.semantic, size),
                            np.clip(resize_bilinear(t.heatmap, size), 0.0, 1.0),
                            off, resize_nearest(t.thing_mask, size))
        t.offsets[~t.thing_mask] = 0.0
    if flip:
        off = t.offsets[:, ::-1].copy()
        off[..., 1] *= -1.0
        t = TrainingTargets(t.semantic[:, ::-1], t.heatmap[:, ::-1], off, t.thing_mask[:, ::-1])
    return t


def _augment_batch(images, targets, cfg: LearnerConfig, rng: np.random.Generator):
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    flips = rng.random(len(images)) < 0.5 if cfg.flip else np.zeros(len(images), bool)
    size = scaled_size(images[0].shape, scale)
    xs, ts = [], []
    for img, t, f in zip(images, targets, flips):
        x = img.astype(np.float64)
        if size != img.shape[:2]:
            x = resize_bilinear(x, size)
        if f:
            x = x[:, ::-1]
        xs.append(x)
        ts.append(_augment_targets(t, size, bool(f)))
    return np.stack(xs), ts


def _as_float_images(images):
    return [np.asarray(im, dtype=np.float64) / 255.0 if np.asarray(im).dtype == np.uint8
            else np.asarray(im, dtype=np.float64) for im in images]


def train(dataset: Sequence[Tuple[np.ndarray, TrainingTargets]], config: LearnerConfig,
          init: Optional[Checkpoint] = None, provenance: str = "train",
          callback: Optional[Callable[[int, float], None]] = None) -> Checkpoint:
    """Minimise the combined loss with seeded SGD (or Adam) and poly decay.

    Every stochastic choice (shuffling, flips, scale, dropped blocks) comes
    from ``config.rng_seed``.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if init is not None:
        arch = (init.config.capacity, init.config.depth, init.config.num_logits)
        if arch != (config.capacity, config.depth, config.num_logits):
            raise ShapeError(f"init checkpoint architecture {arch} does not match config")
        if config.steps == 0:
            return init
        ckpt = Checkpoint(config, init.parameters.copy(), init.step,
                          f"{init.provenance} -> {provenance}")
    else:
        ckpt = init_checkpoint(config, provenance)
        if config.steps == 0:
            return ckpt
    _, shuffle_ss, aug_ss, drop_ss = np.random.SeedSequence(config.rng_seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)

    images = _as_float_images([d[0] for d in dataset])
    targets = [d[1] for d in dataset]
    theta = ckpt.parameters
    velocity = np.zeros_like(theta)
    second = np.zeros_like(theta)
    order: List[int] = []
    trace = []
    for step in range(config.steps):
        batch = []
        while len(batch) < min(config.batch_size, len(dataset)):
            if not order:
                order = list(shuffle_rng.permutation(len(dataset)))
            batch.append(order.pop())
        xb, tb = _augment_batch([images[i] for i in batch], [targets[i] for i in batch],
                                config, aug_rng)
        keep = network.sample_keep(config.depth, config.survival_prob, drop_rng)
        total, _, grad = loss_and_gradient(theta, config, xb, tb, keep)
        trace.append(total)
        if callback is not None:
            callback(step, total)
        if config.clip_norm is not None:
            norm = float(np.sqrt(grad @ grad))
            if norm > config.clip_norm:
                grad *= config.clip_norm / norm
        lr = poly_lr(config.base_lr, step, config.steps, config.poly_power)
        if config.optimizer == "sgd":
            velocity = config.momentum * velocity + grad
            theta = theta - lr * velocity
        else:
            b1, b2 = 0.9, 0.999
            velocity = b1 * velocity + (1 - b1) * grad
            second = b2 * second + (1 - b2) * grad * grad
            t = step + 1
            mhat = velocity / (1 - b1 ** t)
            vhat = second / (1 - b2 ** t)
            theta = theta - lr * mhat / (np.sqrt(vhat) + 1e-8)
    out = Checkpoint(config, theta, ckpt.step + config.steps, ckpt.provenance)
    out.trace = trace
    return out


FINETUNE_STEP_FRACTION = 0.25
FINETUNE_LR_FRACTION = 0.1


def finetune(checkpoint: Checkpoint, dataset, provenance: str = "finetune", **overrides) -> Checkpoint:
    """Continue training ``checkpoint`` on labeled data.

    Defaults to a quarter of the original step budget at a tenth of the base
    learning rate; any :class:`LearnerConfig` field can be overridden.
    """
    cfg = checkpoint.config
    defaults = {
        "steps": int(math.ceil(cfg.steps * FINETUNE_STEP_FRACTION)),
        "base_lr": cfg.base_lr * FINETUNE_LR_FRACTION,
    }
    defaults.update(overrides)
    ft_cfg = cfg.replace(**defaults)
    if ft_cfg.steps == 0:
        return Checkpoint(checkpoint.config, checkpoint.parameters.copy(), checkpoint.step,
                          f"{checkpoint.provenance} -> {provenance}(steps=0)")
    out = train(dataset, ft_cfg, init=checkpoint, provenance=provenance)
    return out


def enlarge(config: LearnerConfig, factor: float) -> LearnerConfig:
    """Student config with ``ceil(capacity * factor)`` channels."""
    if factor < 1:
        raise ValueError(f"student must be equal or larger: factor {factor} < 1")
    if factor == 1:
        return config
    return config.replace(capacity=int(math.ceil(config.capacity * factor - 1e-9)))
