"""Continuous piecewise-linear functions of one variable.

A :class:`PwlFunction` stores ordered breakpoints, one slope per region and
the function value at the first breakpoint. Values elsewhere are obtained by
integrating slopes, so the function is continuous by construction.

:class:`AplParams1D` holds the hinge slopes ``a`` and hinge locations ``b`` of
a single adaptive piecewise linear unit::

    h(x) = max(0, x) + sum_s a[s] * max(0, -x + b[s])

The converters between the two forms are exact up to float rounding, which
makes them usable as oracles for the layer code in :mod:`aplnet.layers`.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PwlError(ValueError):
    """Raised for invalid piecewise-linear inputs."""


class IdentityTailError(PwlError):
    """The function has no exact APL representation (identity right tail missing)."""


def _as_floats(values: Sequence[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class PwlFunction:
    """Continuous PWL function; ``anchor_value`` is ``f(breakpoints[0])``, or ``f(0)``
    when there are no breakpoints."""

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    anchor_value: float = 0.0
    _values: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bps = _as_floats(self.breakpoints)
        slopes = _as_floats(self.slopes)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "anchor_value", float(self.anchor_value))
        if len(slopes) != len(bps) + 1:
            raise PwlError(
                f"need len(slopes) == len(breakpoints) + 1, got {len(slopes)} and {len(bps)}"
            )
        if not all(math.isfinite(v) for v in bps + slopes + (self.anchor_value,)):
            raise PwlError("breakpoints, slopes and anchor_value must be finite")
        if any(b1 <= b0 for b0, b1 in zip(bps, bps[1:])):
            raise PwlError(f"breakpoints must be strictly increasing: {bps}")
        values = [self.anchor_value]
        for k in range(1, len(bps)):
            values.append(values[-1] + slopes[k] * (bps[k] - bps[k - 1]))
        object.__setattr__(self, "_values", tuple(values))

    @property
    def n_regions(self) -> int:
        return len(self.slopes)

    @property
    def left_slope(self) -> float:
        return self.slopes[0]

    @property
    def right_slope(self) -> float:
        return self.slopes[-1]

    def values_at_breakpoints(self) -> tuple[float, ...]:
        return self._values

    def __call__(self, x):
        if np.ndim(x) == 0:
            return eval_pwl(self, float(x))
        return eval_pwl_grid(self, x)


@dataclass(frozen=True)
class AplParams1D:
    a: tuple[float, ...] = ()
    b: tuple[float, ...] = ()

    def __post_init__(self):
        a = _as_floats(self.a)
        b = _as_floats(self.b)
        if len(a) != len(b):
            raise PwlError(f"a and b must have equal length, got {len(a)} and {len(b)}")
        if not all(math.isfinite(v) for v in a + b):
            raise PwlError("APL parameters must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def S(self) -> int:
        return len(self.a)

    def __call__(self, x):
        return eval_apl(self, x)


def eval_pwl(f: PwlFunction, x: float) -> float:
    """Evaluate ``f`` at a scalar ``x``.

    A point lying exactly on a breakpoint belongs to the region on its right.
    """
    x = float(x)
    if not math.isfinite(x):
        raise PwlError(f"cannot evaluate at non-finite x={x}")
    bps = f.breakpoints
    if not bps:
        return f.anchor_value + f.slopes[0] * x
    if x < bps[0]:
        return f.anchor_value + f.slopes[0] * (x - bps[0])
    k = bisect.bisect_right(bps, x) - 1
    return f._values[k] + f.slopes[k + 1] * (x - bps[k])


def eval_pwl_grid(f: PwlFunction, xs) -> np.ndarray:
    """Vectorised :func:`eval_pwl`; identical arithmetic per element."""
    xs = np.asarray(xs, dtype=np.float64)
    if not np.all(np.isfinite(xs)):
        raise PwlError("cannot evaluate at non-finite x")
    bps = np.asarray(f.breakpoints)
    slopes = np.asarray(f.slopes)
    if bps.size == 0:
        return f.anchor_value + slopes[0] * xs
    values = np.asarray(f._values)
    k = np.searchsorted(bps, xs, side="right") - 1
    left = k < 0
    kk = np.where(left, 0, k)
    out = values[kk] + slopes[kk + 1] * (xs - bps[kk])
    out[left] = f.anchor_value + slopes[0] * (xs[left] - bps[0])
    return out


def eval_apl(p: AplParams1D, x):
    """Direct evaluation of the hinge sum, scalar or array ``x``."""
    if np.ndim(x) == 0:
        x = float(x)
        out = max(0.0, x)
        for a_s, b_s in zip(p.a, p.b):
            out += a_s * max(0.0, -x + b_s)
        return out
    xs = np.asarray(x, dtype=np.float64)
    out = np.maximum(0.0, xs)
    for a_s, b_s in zip(p.a, p.b):
        out = out + a_s * np.maximum(0.0, -xs + b_s)
    return out


def apl_to_pwl(p: AplParams1D) -> PwlFunction:
    """Canonical piecewise-linear form of an APL unit.

    Hinges at bit-identical locations are merged, and locations whose summed
    slope jump is exactly zero are dropped. Region slopes are computed
    directly from the hinges active in each region, so the right tail slope
    is exactly 1 and the left tail slope is exactly ``-sum(a)`` whenever the
    kink at 0 survives.
    """
    return hinge_sum_to_pwl(p.a, p.b, relu=True)


def identity_tail_error(g: PwlFunction) -> float:
    """Distance of ``g`` from the identity at its last breakpoint (or at 0)."""
    if not g.breakpoints:
        return abs(g.anchor_value)
    last = g.breakpoints[-1]
    return abs(g.values_at_breakpoints()[-1] - last)


def pwl_to_apl(g: PwlFunction, *, atol: float = 1e-9) -> AplParams1D:
    """Express ``g`` as an APL unit via the constructive hinge decomposition.

    The hinge at breakpoint ``b_k`` gets coefficient ``slope[k+1] - slope[k]``
    and one extra hinge at 0 with coefficient -1 cancels the left half of the
    leading ``max(0, x)``. Coefficients at equal locations are summed and zero
    ones are pruned.

    ``g`` must have right tail slope exactly 1 and satisfy ``g(x) = x`` on the
    right tail (within ``atol``); anything else raises
    :class:`IdentityTailError`, since the hinge sum has no bias term.
    """
    if g.right_slope != 1.0:
        raise IdentityTailError(f"rightmost slope must be 1, got {g.right_slope!r}")
    err = identity_tail_error(g)
    scale = 1.0 + (abs(g.breakpoints[-1]) if g.breakpoints else 0.0)
    if err > atol * scale:
        raise IdentityTailError(
            f"g(x) != x on the right tail: offset {err:.3e} exceeds tolerance"
        )
    coeffs: dict[float, list[float]] = {0.0: [-1.0]}
    for k, loc in enumerate(g.breakpoints):
        coeffs.setdefault(loc + 0.0, []).append(g.slopes[k + 1] - g.slopes[k])
    a, b = [], []
    for loc in sorted(coeffs):
        c = math.fsum(coeffs[loc])
        if c != 0.0:
            a.append(c)
            b.append(loc)
    return AplParams1D(tuple(a), tuple(b))


def hinge_sum_to_pwl(coeffs: Sequence[float], locations: Sequence[float], relu: bool) -> PwlFunction:
    """Canonical PWL form of ``[max(0,x)] + sum_j c_j * max(0, -x + loc_j)``."""
    coeffs = _as_floats(coeffs)
    locations = _as_floats(locations)
    jumps: dict[float, list[float]] = {0.0: [1.0]} if relu else {}
    for c, loc in zip(coeffs, locations):
        jumps.setdefault(loc + 0.0, []).append(c)  # + 0.0 folds -0.0 into 0.0
    kept = sorted(loc for loc, js in jumps.items() if math.fsum(js) != 0.0)
    slopes = []
    for r in range(len(kept) + 1):
        # derivative just left of the region's right end; dropped locations
        # inside the region carry an exactly-zero jump
        right_end = kept[r] if r < len(kept) else math.inf
        terms = [1.0] if relu and 0.0 < right_end else []
        terms += [-c for c, loc in zip(coeffs, locations) if loc >= right_end]
        slopes.append(math.fsum(terms))
    x0 = kept[0] if kept else 0.0
    anchor = max(0.0, x0) if relu else 0.0
    for c, loc in zip(coeffs, locations):
        anchor += c * max(0.0, -x0 + loc)
    return PwlFunction(tuple(kept), tuple(slopes), anchor)


def maxout_pair_from_apl(p: AplParams1D) -> tuple[PwlFunction, PwlFunction]:
    """Split an APL unit into two convex parts whose difference is the unit.

    ``convex`` collects ``max(0, x)`` and the hinges with positive slope,
    ``concave`` is the negated sum of hinges with negative slope. Both have
    non-decreasing slopes, so each is exactly a maxout unit over the same
    tied input; see :func:`convex_pwl_to_lines`.
    """
    pos = [(a_s, b_s) for a_s, b_s in zip(p.a, p.b) if a_s > 0]
    neg = [(-a_s, b_s) for a_s, b_s in zip(p.a, p.b) if a_s < 0]
    convex = hinge_sum_to_pwl([c for c, _ in pos], [l for _, l in pos], relu=True)
    concave = hinge_sum_to_pwl([c for c, _ in neg], [l for _, l in neg], relu=False)
    return convex, concave


def is_convex(f: PwlFunction) -> bool:
    return all(s1 >= s0 for s0, s1 in zip(f.slopes, f.slopes[1:]))


def convex_pwl_to_lines(f: PwlFunction) -> tuple[np.ndarray, np.ndarray]:
    """Slopes ``c`` and intercepts ``d`` with ``f(x) == max_k(c[k]*x + d[k])``.

    One line per region; only valid for convex ``f``.
    """
    if not is_convex(f):
        raise PwlError("maxout lines require a convex function (non-decreasing slopes)")
    bps = f.breakpoints
    values = f.values_at_breakpoints()
    c = np.asarray(f.slopes, dtype=np.float64)
    d = np.empty_like(c)
    if not bps:
        d[0] = f.anchor_value
        return c, d
    d[0] = values[0] - c[0] * bps[0]
    for k in range(len(bps)):
        d[k + 1] = values[k] - c[k + 1] * bps[k]
    return c, d


def mlpconv_tied_eval(p: AplParams1D, x: float) -> float:
    """Evaluate an APL unit as a weight-tied two-stage rectifier network.

    Stage one computes ``max(0, c_k * x + bias_k)`` with ``c_k`` in {-1, +1}:
    ``c_0 = +1, bias_0 = 0`` and ``c_s = -1, bias_s = b[s]`` for every hinge.
    Stage two sums them with weights ``[1, a_1, ..., a_S]``.
    """
    signs, biases, weights = mlpconv_tied_weights(p)
    x = float(x)
    out = 0.0
    for c, bias, w in zip(signs, biases, weights):
        out += w * max(0.0, c * x + bias)
    return out


def mlpconv_tied_weights(p: AplParams1D) -> tuple[list[float], list[float], list[float]]:
    signs = [1.0] + [-1.0] * p.S
    biases = [0.0] + list(p.b)
    weights = [1.0] + list(p.a)
    return signs, biases, weights


def mlpconv_tied_forward(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tied two-stage network over a bank of filters.

    ``x`` holds filter responses of shape ``(N, F)``; ``a`` and ``b`` have
    shape ``(F, S)``. Stage one has ``F * (S + 1)`` rectified units, unit
    ``k`` reading filter ``kappa(k) = k // (S + 1)`` with sign ``c_k``; stage
    two sums the units belonging to each filter with its hinge weights.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    F, S = a.shape
    kappa = np.repeat(np.arange(F), S + 1)
    c = np.tile(np.r_[1.0, -np.ones(S)], F)
    bias1 = np.concatenate([np.zeros((F, 1)), b], axis=1).ravel()
    w2 = np.concatenate([np.ones((F, 1)), a], axis=1).ravel()
    f1 = np.maximum(0.0, c * x[:, kappa] + bias1)
    f2 = np.zeros((x.shape[0], F))
    np.add.at(f2.T, kappa, (w2 * f1).T)
    return f2


# -- plain-text records -------------------------------------------------------

def _fmt(v: float) -> str:
    return format(v, ".17g")


def pwl_to_text(f: PwlFunction) -> str:
    """``pwl <n> <anchor>``, then ``<b_k> <slope left of b_k>``, then ``tail <slope>``."""
    lines = [f"pwl {len(f.breakpoints)} {_fmt(f.anchor_value)}"]
    for bp, s in zip(f.breakpoints, f.slopes):
        lines.append(f"{_fmt(bp)} {_fmt(s)}")
    lines.append(f"tail {_fmt(f.slopes[-1])}")
    return "\n".join(lines) + "\n"


def pwl_from_text(text: str) -> PwlFunction:
    rows = [ln.split() for ln in text.strip().splitlines()]
    if not rows or rows[0][0] != "pwl" or len(rows[0]) != 3:
        raise PwlError("missing 'pwl <n> <anchor>' header")
    n = int(rows[0][1])
    body = rows[1:]
    if len(body) != n + 1 or body[-1][0] != "tail":
        raise PwlError(f"expected {n} breakpoint lines and a tail line")
    bps = [float(r[0]) for r in body[:-1]]
    slopes = [float(r[1]) for r in body[:-1]] + [float(body[-1][1])]
    return PwlFunction(tuple(bps), tuple(slopes), float(rows[0][2]))


def apl_to_text(p: AplParams1D) -> str:
    lines = [f"apl {p.S}"] + [f"{_fmt(a)} {_fmt(b)}" for a, b in zip(p.a, p.b)]
    return "\n".join(lines) + "\n"


def apl_from_text(text: str) -> AplParams1D:
    rows = [ln.split() for ln in text.strip().splitlines()]
    if not rows or rows[0][0] != "apl":
        raise PwlError("missing 'apl <S>' header")
    S = int(rows[0][1])
    if len(rows) - 1 != S:
        raise PwlError(f"expected {S} hinge lines, got {len(rows) - 1}")
    return AplParams1D(tuple(float(r[0]) for r in rows[1:]), tuple(float(r[1]) for r in rows[1:]))
