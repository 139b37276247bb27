"""Reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the recorded graph in reverse topological order, so each node's
gradient is complete before its rule fires.

Kink conventions: the derivative of ``max(0, x)`` at 0 is 0, and the
derivative of ``max(0, -x + b)`` at ``x = b`` is 0 (strict indicators).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from aplnet import functional as F
from aplnet.functional import ShapeError

_ids = itertools.count()


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "name", "requires_grad", "grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar for the few ops that read naturally
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name, requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, rule) -> Tensor:
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = rule
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- ops ----------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    return _node(x.data + y.data, (x, y), "add",
                 lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def mul(x: Tensor, y: Tensor) -> Tensor:
    return _node(x.data * y.data, (x, y), "mul",
                 lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul shapes {x.shape} and {w.shape} do not compose")
    return _node(x.data @ w.data, (x, w), "matmul",
                 lambda g: (g @ w.data.T, x.data.T @ g))


def dense(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, w), bias)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _node(np.asarray(x.data.sum()).reshape(1), (x,), "sum",
                 lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    return _node(F.relu_forward(x.data), (x,), "relu",
                 lambda g: (F.relu_backward(x.data, g),))


def leaky_relu(x: Tensor, k: float) -> Tensor:
    return _node(F.leaky_relu_forward(x.data, k), (x,), "leaky_relu",
                 lambda g: (F.leaky_relu_backward(x.data, k, g),))


def apl(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Adaptive piecewise linear activation; see :func:`aplnet.functional.apl_forward`."""
    out = F.apl_forward(x.data, a.data, b.data)

    def rule(g):
        return F.apl_backward(x.data, a.data, b.data, g)

    return _node(out, (x, a, b), "apl", rule)


def maxout(x: Tensor, k: int) -> Tensor:
    out, argmax = F.maxout_forward(x.data, k, return_argmax=True)
    return _node(out, (x,), "maxout", lambda g: (F.maxout_backward(x.shape, k, argmax, g),))


def dropout(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed (already rescaled) keep mask."""
    return _node(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    out, cols = F.conv2d_forward(x.data, w.data, bias.data, stride, pad)

    def rule(g):
        return F.conv2d_backward(x.shape, w.data, cols, g, stride, pad)

    return _node(out, (x, w, bias), "conv2d", rule)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    out, idx = F.maxpool_forward(x.data, k, stride)
    return _node(out, (x,), "maxpool", lambda g: (F.maxpool_backward(x.shape, k, stride, idx, g),))


def avgpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    out = F.avgpool_forward(x.data, k, stride)
    return _node(out, (x,), "avgpool", lambda g: (F.avgpool_backward(x.shape, k, stride, g),))


def softmax_xent(logits: Tensor, labels) -> Tensor:
    loss, probs = F.softmax_xent_forward(logits.data, labels)
    labels = np.asarray(labels)
    return _node(np.asarray([loss], dtype=logits.dtype), (logits,), "softmax_xent",
                 lambda g: (F.softmax_xent_backward(probs, labels) * g[0],))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - target
    return _node(np.asarray([np.mean(diff * diff)], dtype=pred.dtype), (pred,), "mse",
                 lambda g: (2.0 * diff / diff.size * g[0],))


# -- reverse pass ---------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    state[root.id] = 1
    while stack:
        node, parents = stack[-1]
        for p in parents:
            s = state.get(p.id)
            if s == 1:
                raise RuntimeError(f"cycle in tape at {p!r}")
            if s is None:
                state[p.id] = 1
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            state[node.id] = 2
            order.append(node)
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf that needs one.

    Returns a map from parameter name to gradient. Every tensor in ``params``
    gets an entry, zero-filled when the loss does not depend on it. Gradients
    are also stored on ``tensor.grad`` and are recomputed from scratch on each
    call, never accumulated across calls.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(node.id)
        if node._backward is None or g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    result: dict[str, np.ndarray] = {}
    seen = set()
    for node in itertools.chain(order, params):
        if node._parents or not node.requires_grad or node.id in seen:
            continue
        seen.add(node.id)
        g = grads.get(node.id)
        node.grad = np.zeros_like(node.data) if g is None else np.asarray(g).reshape(node.shape)
        result[node.name if node.name is not None else f"tensor{node.id}"] = node.grad
    return result


# -- finite differences -----------------------------------------------------------

class OracleError(ArithmeticError):
    pass


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    excluded: list[int] = field(default_factory=list)
    excluded_max_rel_error: float = 0.0

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(f: Callable[[np.ndarray], float], theta, grad, h: float = 1e-5,
                      kink_distances: Callable[[np.ndarray], np.ndarray] | None = None,
                      kink_tol: float = 1e-3) -> GradCheckResult:
    """Compare ``grad`` with central differences of ``f`` at ``theta``.

    The error per coordinate is ``|g - c| / max(1, |g| + |c|)``. When
    ``kink_distances`` is given it must return, for a parameter vector, the
    signed distance of every pre-activation to every kink it can cross. A
    coordinate is excluded (and reported separately) if perturbing it moves
    any distance that lies within ``kink_tol`` of zero at ``theta``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != theta.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    d0 = None
    if kink_distances is not None:
        d0 = np.asarray(kink_distances(theta))
        near = np.abs(d0) < kink_tol
    errs = np.empty_like(theta)
    excluded = []
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += h
        minus[i] -= h
        fp, fm = float(f(plus)), float(f(minus))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite objective while perturbing coordinate {i}")
        errs[i] = relative_error(grad[i], (fp - fm) / (2 * h))
        if d0 is not None and near.any():
            moved = (np.asarray(kink_distances(plus)) != d0) | (np.asarray(kink_distances(minus)) != d0)
            if np.any(moved & near):
                excluded.append(i)
    mask = np.ones(theta.size, dtype=bool)
    mask[excluded] = False
    return GradCheckResult(
        max_rel_error=float(errs[mask].max()) if mask.any() else 0.0,
        n_checked=int(mask.sum()),
        excluded=excluded,
        excluded_max_rel_error=float(errs[~mask].max()) if excluded else 0.0,
    )
