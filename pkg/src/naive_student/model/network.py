"""A small three-head encoder-decoder with hand-written backpropagation.

Layout (channels-last, ``s = capacity``, ``t = 2 * capacity``)::

    image -> conv3x3(3->s) -> relu ----------------------------.
          -> avgpool4 -> conv3x3(s->t) -> relu                   |
          -> depth x [ b + keep * conv3x3(relu(conv3x3(b))) ]    |
          -> bilinear x4 -------------------------------- concat
          -> 1x1(s+t -> t) -> relu -> 1x1(t -> C + 3)

The last layer's channels are ``C`` semantic logits, one center-heatmap
channel and two offset channels. Residual blocks use stochastic depth: while
training each block is kept with probability ``survival_prob``; at inference
the residual branch is scaled by ``survival_prob``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..imaging import interp_matrix
from ..types import PredictionVolume

STRIDE = 4
OFFSET_SCALE = 4.0


class ShapeError(ValueError):
    """Parameters do not match the architecture described by the config."""


def layer_shapes(capacity: int, depth: int, num_logits: int) -> List[Tuple[str, tuple]]:
    s, t = capacity, 2 * capacity
    shapes = [
        ("stem_w", (9 * 3, s)), ("stem_b", (s,)),
        ("down_w", (9 * s, t)), ("down_b", (t,)),
    ]
    for i in range(depth):
        shapes += [
            (f"block{i}_a_w", (9 * t, t)), (f"block{i}_a_b", (t,)),
            (f"block{i}_b_w", (9 * t, t)), (f"block{i}_b_b", (t,)),
        ]
    shapes += [
        ("head_w", (s + t, t)), ("head_b", (t,)),
        ("out_w", (t, num_logits + 3)), ("out_b", (num_logits + 3,)),
    ]
    return shapes


def parameter_count(capacity: int, depth: int, num_logits: int) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_shapes(capacity, depth, num_logits))


def unflatten(flat: np.ndarray, capacity: int, depth: int, num_logits: int) -> Dict[str, np.ndarray]:
    """Named views into a flat parameter vector."""
    shapes = layer_shapes(capacity, depth, num_logits)
    total = sum(int(np.prod(s)) for _, s in shapes)
    if flat.ndim != 1 or flat.size != total:
        raise ShapeError(f"expected {total} parameters, got {flat.size}")
    views, pos = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        views[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return views


def init_parameters(capacity: int, depth: int, num_logits: int, rng: np.random.Generator) -> np.ndarray:
    flat = np.zeros(parameter_count(capacity, depth, num_logits))
    p = unflatten(flat, capacity, depth, num_logits)
    for name, arr in p.items():
        if not name.endswith("_w"):
            continue
        fan_in = arr.shape[0]
        std = np.sqrt(2.0 / fan_in)
        if name.endswith("_b_w") and name.startswith("block"):
            std *= 0.5
        if name == "out_w":
            std = 0.01
        arr[...] = rng.normal(0.0, std, size=arr.shape)
    return flat


# -- primitive layers ---------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + h, kj:kj + w, :] += d[:, :, :, ki, kj, :]
    return dxp[:, 1:-1, 1:-1, :]


def _conv_forward(x, w, b):
    cols = _im2col(x)
    n, h, wd, _ = x.shape
    y = (cols @ w + b).reshape(n, h, wd, -1)
    return y, cols


def _dense(x, w, b):
    """Per-pixel affine map; 2-D matmul is much faster than the broadcast form."""
    return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(x.shape[:-1] + (w.shape[1],))


def _conv_backward(dy, cols, w, x_shape):
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = cols.T @ dy2
    db = dy2.sum(axis=0)
    dx = _col2im(dy2 @ w.T, x_shape)
    return dx, dw, db


def _avgpool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // STRIDE, STRIDE, w // STRIDE, STRIDE, c).mean(axis=(2, 4))


def _avgpool_backward(dy):
    g = np.repeat(np.repeat(dy, STRIDE, axis=1), STRIDE, axis=2)
    return g / (STRIDE * STRIDE)


def _upsample(x, size):
    n, h, w, c = x.shape
    rh = interp_matrix(size[0], h)
    rw = interp_matrix(size[1], w)
    rows = np.matmul(rh, x.reshape(n, h, w * c)).reshape(n, size[0], w, c)
    return np.matmul(rw, rows)


def _upsample_backward(dy, in_size):
    n, oh, ow, c = dy.shape
    rh = interp_matrix(oh, in_size[0])
    rw = interp_matrix(ow, in_size[1])
    cols = np.matmul(rw.T, dy)
    return np.matmul(rh.T, cols.reshape(n, oh, in_size[1] * c)).reshape(n, in_size[0], in_size[1], c)


def _pad_to_stride(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    ph = (-h) % STRIDE
    pw = (-w) % STRIDE
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")


# -- forward / backward -------------------------------------------------------

@dataclass
class _Cache:
    in_shape: tuple
    padded_shape: tuple
    stem_cols: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    down_cols: np.ndarray
    z2: np.ndarray
    blocks: list
    keep: np.ndarray
    low_shape: tuple
    cat: np.ndarray
    zh: np.ndarray
    ah: np.ndarray


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 or [0, 1] float images (N, H, W, 3) -> zero-centered float64."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0 - 0.5
    return images.astype(np.float64) - 0.5


def forward_batch(x: np.ndarray, params: Dict[str, np.ndarray], depth: int,
                  keep: np.ndarray, need_cache: bool = False):
    """Run the network on normalized images ``x`` of shape (N, H, W, 3).

    ``keep`` holds one multiplier per residual block (0/1 while training,
    ``survival_prob`` at inference). Returns ``(out, cache)`` where ``out`` is
    (N, H, W, C + 3) cropped back to the input size.
    """
    n, h, w, _ = x.shape
    xp = _pad_to_stride(x)
    hp, wp = xp.shape[1:3]

    z1, stem_cols = _conv_forward(xp, params["stem_w"], params["stem_b"])
    a1 = np.maximum(z1, 0.0)
    p = _avgpool(a1)
    z2, down_cols = _conv_forward(p, params["down_w"], params["down_b"])
    b = np.maximum(z2, 0.0)
    blocks = []
    for i in range(depth):
        za, cols_a = _conv_forward(b, params[f"block{i}_a_w"], params[f"block{i}_a_b"])
        ua = np.maximum(za, 0.0)
        r, cols_b = _conv_forward(ua, params[f"block{i}_b_w"], params[f"block{i}_b_b"])
        blocks.append((cols_a, za, cols_b, ua.shape))
        if keep[i] != 0.0:
            b = b + keep[i] * r
    low_shape = b.shape
    up = _upsample(b, (hp, wp))
    cat = np.concatenate([a1, up], axis=-1)
    zh = _dense(cat, params["head_w"], params["head_b"])
    ah = np.maximum(zh, 0.0)
    out = _dense(ah, params["out_w"], params["out_b"])
    out = out[:, :h, :w, :].copy()
    out[..., -2:] *= OFFSET_SCALE
    cache = None
    if need_cache:
        cache = _Cache((n, h, w), xp.shape, stem_cols, z1, a1, down_cols, z2, blocks,
                       np.asarray(keep, dtype=np.float64), low_shape, cat, zh, ah)
    return out, cache


def backward_batch(dout: np.ndarray, cache: _Cache, params: Dict[str, np.ndarray],
                   grads: Dict[str, np.ndarray], depth: int) -> None:
    """Accumulate parameter gradients for ``dout = dLoss/d(out)`` into ``grads``."""
    n, h, w = cache.in_shape
    _, hp, wp, _ = cache.padded_shape
    dout = dout.copy()
    dout[..., -2:] *= OFFSET_SCALE
    d_full = np.zeros((n, hp, wp, dout.shape[-1]))
    d_full[:, :h, :w, :] = dout
    d2 = d_full.reshape(-1, d_full.shape[-1])

    ah2 = cache.ah.reshape(-1, cache.ah.shape[-1])
    grads["out_w"] += ah2.T @ d2
    grads["out_b"] += d2.sum(axis=0)
    dzh = (d2 @ params["out_w"].T) * (cache.zh.reshape(-1, cache.zh.shape[-1]) > 0)
    cat2 = cache.cat.reshape(-1, cache.cat.shape[-1])
    grads["head_w"] += cat2.T @ dzh
    grads["head_b"] += dzh.sum(axis=0)
    dcat = (dzh @ params["head_w"].T).reshape(cache.cat.shape)

    s = cache.a1.shape[-1]
    da1 = dcat[..., :s]
    dup = dcat[..., s:]
    db = _upsample_backward(dup, cache.low_shape[1:3])

    for i in reversed(range(depth)):
        cols_a, za, cols_b, ua_shape = cache.blocks[i]
        k = cache.keep[i]
        if k == 0.0:
            continue
        dr = k * db
        dua, dw, dbias = _conv_backward(dr, cols_b, params[f"block{i}_b_w"], ua_shape)
        grads[f"block{i}_b_w"] += dw
        grads[f"block{i}_b_b"] += dbias
        dza = dua * (za > 0)
        dbb, dw, dbias = _conv_backward(dza, cols_a, params[f"block{i}_a_w"], za.shape)
        grads[f"block{i}_a_w"] += dw
        grads[f"block{i}_a_b"] += dbias
        db = db + dbb

    dz2 = db * (cache.z2 > 0)
    p_shape = (n, hp // STRIDE, wp // STRIDE, s)
    dp, dw, dbias = _conv_backward(dz2, cache.down_cols, params["down_w"], p_shape)
    grads["down_w"] += dw
    grads["down_b"] += dbias
    da1 = da1 + _avgpool_backward(dp)
    dz1 = da1 * (cache.z1 > 0)
    dz1_2 = dz1.reshape(-1, s)
    grads["stem_w"] += cache.stem_cols.T @ dz1_2
    grads["stem_b"] += dz1_2.sum(axis=0)


def split_output(out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(…, C + 3) raw output -> (logits, heatmap, offsets) views."""
    return out[..., :-3], out[..., -3], out[..., -2:]


def to_volume(out: np.ndarray) -> PredictionVolume:
    logits, heat, off = split_output(out)
    return PredictionVolume(np.ascontiguousarray(logits), np.ascontiguousarray(heat),
                            np.ascontiguousarray(off))


def inference_keep(depth: int, survival_prob: float) -> np.ndarray:
    return np.full(depth, float(survival_prob))


def sample_keep(depth: int, survival_prob: float, rng: Optional[np.random.Generator]) -> np.ndarray:
    if survival_prob >= 1.0 or rng is None:
        return np.ones(depth)
    return (rng.random(depth) < survival_prob).astype(np.float64)
