"""Numpy forward/backward kernels for every differentiable op.

All functions are pure. Backward kernels take the upstream gradient ``g``
and return gradients for the inputs they were given.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


# -- rectifiers -------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def leaky_relu_forward(x: np.ndarray, k: float) -> np.ndarray:
    """``x`` where ``x > 0``, ``k * x`` otherwise."""
    return np.where(x > 0, x, k * x)


def leaky_relu_backward(x: np.ndarray, k: float, g: np.ndarray) -> np.ndarray:
    # strict on both sides: slope 0 exactly at the kink, same as the APL unit
    return g * ((x > 0) + k * (x < 0))


# -- adaptive piecewise linear unit ------------------------------------------------

def _per_unit(p: np.ndarray, ndim: int) -> np.ndarray:
    # (M, S) -> (M, 1, ..., 1, S) so it broadcasts against x[..., None]
    return p.reshape(p.shape[0], *([1] * (ndim - 2)), p.shape[1])


def _check_apl_shapes(x: np.ndarray, a: np.ndarray, b: np.ndarray):
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"a and b must be matching (M, S) matrices, got {a.shape} and {b.shape}")
    if x.ndim < 2 or x.shape[1] != a.shape[0]:
        raise ShapeError(f"input {x.shape} does not have M={a.shape[0]} units on axis 1")


def apl_forward(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``max(0, x) + sum_s a[i, s] * max(0, -x + b[i, s])`` for unit ``i`` on axis 1.

    ``x`` has shape ``(N, M, *spatial)``; trailing spatial axes share the
    unit's parameters. With ``S = 0`` this is exactly :func:`relu_forward`.
    """
    _check_apl_shapes(x, a, b)
    out = relu_forward(x)
    if a.shape[1] == 0:
        return out
    hinge = np.maximum(_per_unit(b, x.ndim) - x[..., None], 0.0)
    return out + np.sum(_per_unit(a, x.ndim) * hinge, axis=-1)


def apl_backward(x: np.ndarray, a: np.ndarray, b: np.ndarray, g: np.ndarray):
    """Gradients ``(dx, da, db)`` of the APL unit.

    ``dx = g * (1{x>0} - sum_s a_s 1{x<b_s})``, ``da_s = sum g * max(0, b_s - x)``,
    ``db_s = sum g * a_s 1{x<b_s}``; sums run over the batch and spatial axes.
    """
    _check_apl_shapes(x, a, b)
    if a.shape[1] == 0:
        return relu_backward(x, g), np.zeros_like(a), np.zeros_like(b)
    ae = _per_unit(a, x.ndim)
    be = _per_unit(b, x.ndim)
    xe = x[..., None]
    active = xe < be
    hinge = np.maximum(be - xe, 0.0)
    dx = g * ((x > 0) - np.sum(ae * active, axis=-1))
    ge = g[..., None]
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    da = np.sum(ge * hinge, axis=reduce_axes)
    db = np.sum(ge * ae * active, axis=reduce_axes)
    return dx, da, db


# -- maxout --------------------------------------------------------------------------

def maxout_forward(x: np.ndarray, k: int, return_argmax: bool = False):
    """Max over consecutive groups of ``k`` channels on axis 1."""
    if k < 1 or x.shape[1] % k:
        raise ShapeError(f"width {x.shape[1]} is not divisible by K={k}")
    grouped = x.reshape(x.shape[0], x.shape[1] // k, k, *x.shape[2:])
    idx = np.argmax(grouped, axis=2)
    out = np.take_along_axis(grouped, idx[:, :, None], axis=2)[:, :, 0]
    return (out, idx) if return_argmax else out


def maxout_backward(x_shape, k: int, argmax: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, width = x_shape[0], x_shape[1]
    dx = np.zeros((n, width // k, k, *x_shape[2:]), dtype=g.dtype)
    np.put_along_axis(dx, argmax[:, :, None], g[:, :, None], axis=2)
    return dx.reshape(x_shape)


# -- loss ----------------------------------------------------------------------------

def softmax_xent_forward(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a softmax over axis 1, stabilised by max subtraction."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_xent_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return g / n


# -- dropout -------------------------------------------------------------------------

def dropout_mask(shape, rate: float, rng, mode: str = "train", dtype=np.float64) -> np.ndarray:
    """Inverted-dropout keep mask: Bernoulli(1 - rate) / (1 - rate), or ones in eval mode.

    ``rng`` is a seed or a :class:`numpy.random.Generator`.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


# -- convolution and pooling ------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int = 0) -> int:
    size = (n + 2 * pad - k) // stride + 1
    if size < 1:
        raise ShapeError(f"window {k} with stride {stride} does not fit input size {n}")
    return size


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, Ho, Wo, k, k) view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x (N, C, H, W)`` with ``w (F, C, kh, kw)``; returns (out, cols)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} do not compose")
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride)[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T + bias
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols


def conv2d_backward(x_shape, w: np.ndarray, cols: np.ndarray, g: np.ndarray, stride: int = 1,
                    pad: int = 0):
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (gm.T @ cols).reshape(w.shape)
    dbias = gm.sum(axis=0)
    dcols = (gm @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, dbias


def maxpool_forward(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    win = _windows(x, k, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(x_shape, k: int, stride: int, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (idx == i * k + j)
    return dx


def avgpool_forward(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    return _windows(x, k, stride)[:, :, :ho, :wo].mean(axis=(-2, -1))


def avgpool_backward(x_shape, k: int, stride: int, g: np.ndarray) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    share = g / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return dx
