"""Combined semantic / center / offset loss and its derivative w.r.t. outputs."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from ..types import PredictionVolume, TrainingTargets


class NumericError(ArithmeticError):
    """Non-finite values reached the loss."""


DEFAULT_LAMBDAS = (1.0, 200.0, 0.01)


def _stack_targets(targets: Sequence[TrainingTargets]):
    sem = np.stack([t.semantic for t in targets])
    heat = np.stack([t.heatmap for t in targets])
    off = np.stack([t.offsets for t in targets])
    mask = np.stack([t.thing_mask for t in targets])
    return sem, heat, off, mask


def loss_and_output_grad(out: np.ndarray, targets: Sequence[TrainingTargets], lambdas,
                         need_grad: bool = True):
    """Loss of raw network output ``out`` (N, H, W, C + 3) on a batch of targets.

    Returns ``(total, breakdown, dout)``. Semantic cross entropy is averaged
    over non-void pixels, heatmap MSE over all pixels and the offset L1 norm
    over thing pixels; each term is 0 when it has no pixels to average.
    """
    if not np.all(np.isfinite(out)):
        raise NumericError("prediction contains NaN or infinite values")
    lam_sem, lam_heat, lam_off = (float(v) for v in lambdas)
    sem_t, heat_t, off_t, mask = _stack_targets(targets)
    if not (np.all(np.isfinite(heat_t)) and np.all(np.isfinite(off_t))):
        raise NumericError("targets contain NaN or infinite values")
    logits = out[..., :-3]
    heat = out[..., -3]
    off = out[..., -2:]

    valid = sem_t > 0
    n_valid = int(valid.sum())
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(z)
    if n_valid:
        picked = np.take_along_axis(logp, sem_t[..., None], axis=-1)[..., 0]
        l_sem = float(-(picked[valid]).sum() / n_valid)
    else:
        l_sem = 0.0

    resid = heat - heat_t
    l_heat = float(np.mean(resid ** 2))

    n_thing = int(mask.sum())
    off_resid = off - off_t
    if n_thing:
        l_off = float(np.abs(off_resid[mask]).sum() / n_thing)
    else:
        l_off = 0.0

    total = lam_sem * l_sem + lam_heat * l_heat + lam_off * l_off
    breakdown = {"sem": l_sem, "heatmap": l_heat, "offset": l_off}
    if not need_grad:
        return total, breakdown, None

    dout = np.zeros_like(out)
    if n_valid and lam_sem != 0.0:
        probs = exp / z
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, sem_t[..., None], 1.0, axis=-1)
        dout[..., :-3] = (probs - onehot) * (valid[..., None] * (lam_sem / n_valid))
    if lam_heat != 0.0:
        dout[..., -3] = resid * (2.0 * lam_heat / resid.size)
    if n_thing and lam_off != 0.0:
        dout[..., -2:] = np.sign(off_resid) * (mask[..., None] * (lam_off / n_thing))
    return total, breakdown, dout


def loss(pred: PredictionVolume, targets: TrainingTargets, lambdas=DEFAULT_LAMBDAS
         ) -> Tuple[float, Dict[str, float]]:
    """Loss of a single :class:`PredictionVolume`."""
    if pred.shape != targets.heatmap.shape:
        raise ValueError(f"prediction {pred.shape} and targets {targets.heatmap.shape} differ in size")
    out = np.concatenate([pred.semantic_logits, pred.center_heatmap[..., None], pred.offsets], axis=-1)
    total, breakdown, _ = loss_and_output_grad(out[None], [targets], lambdas, need_grad=False)
    return total, breakdown
