"""SGD with momentum, weight decay and the L2 penalty on APL parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from aplnet import autodiff as ad
from aplnet.layers import APL_A, APL_B, AplLayerParams

DEFAULT_APL_PENALTY = 0.001


class NonFiniteGradient(FloatingPointError):
    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite gradient for {name!r} at step {step}")
        self.step = step
        self.name = name


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    apl_penalty: float = DEFAULT_APL_PENALTY
    batch_size: int = 64
    epochs: int = 10
    # (epoch, multiplier) pairs; the last pair with epoch <= current applies.
    # None means x0.1 at 50% and x0.01 at 75% of training.
    lr_schedule: list[tuple[int, float]] | None = None
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            errors.append(f"lr must be a finite value >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            errors.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            errors.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.apl_penalty < 0:
            errors.append(f"apl_penalty must be >= 0, got {self.apl_penalty}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_schedule is not None:
            epochs = [e for e, _ in self.lr_schedule]
            if any(e1 <= e0 for e0, e1 in zip(epochs, epochs[1:])):
                errors.append(f"lr_schedule epochs must be strictly increasing: {epochs}")
        return errors

    def schedule(self) -> list[tuple[int, float]]:
        if self.lr_schedule is not None:
            return list(self.lr_schedule)
        sched: dict[int, float] = {0: 1.0}
        sched[max(1, math.ceil(0.5 * self.epochs))] = 0.1
        sched[max(1, math.ceil(0.75 * self.epochs))] = 0.01
        return sorted(sched.items())

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for e, m in self.schedule():
            if e <= epoch:
                mult = m
        return self.lr * mult


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], cfg: TrainConfig,
             roles: dict[str, str] | None = None, lr: float | None = None,
             frozen: frozenset[str] | set[str] = frozenset(), step: int = 0):
    """One momentum step; returns new ``(params, velocity)`` dicts.

    ``v <- momentum * v - lr * (g + decay * theta)`` then ``theta <- theta + v``,
    where ``decay`` is ``cfg.apl_penalty`` for APL slopes/locations and
    ``cfg.weight_decay`` for everything else. Names in ``frozen`` are copied
    through untouched.
    """
    roles = roles or {}
    lr = cfg.lr if lr is None else lr
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        if name in frozen:
            new_params[name] = theta.copy()
            new_velocity[name] = velocity.get(name, np.zeros_like(theta)).copy()
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(step, name)
        decay = cfg.apl_penalty if roles.get(name) in (APL_A, APL_B) else cfg.weight_decay
        v = velocity.get(name)
        v = np.zeros_like(theta) if v is None else v
        step_dir = g + decay * theta if decay else g
        v = cfg.momentum * v - lr * step_dir
        new_params[name] = theta + v
        new_velocity[name] = v
    return new_params, new_velocity


def apl_penalty_loss(p: AplLayerParams, coeff: float = DEFAULT_APL_PENALTY) -> float:
    """``coeff / 2 * (sum a^2 + sum b^2)``; its gradient is ``coeff * a``, ``coeff * b``."""
    if coeff < 0:
        raise ValueError("penalty coefficient must be >= 0")
    return 0.5 * coeff * float(np.sum(p.a * p.a) + np.sum(p.b * p.b))


def apl_penalty_tensor(a: ad.Tensor, b: ad.Tensor, coeff: float = DEFAULT_APL_PENALTY) -> ad.Tensor:
    """Differentiable version of :func:`apl_penalty_loss` on the tape."""
    return ad.scale(ad.add(ad.sum(ad.mul(a, a)), ad.sum(ad.mul(b, b))), 0.5 * coeff)


@dataclass
class SGD:
    """Stateful wrapper applying :func:`sgd_step` to a network's parameter tensors."""

    cfg: TrainConfig
    roles: dict[str, str]
    frozen: frozenset[str] = frozenset()
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], epoch: int):
        current = {n: t.data for n, t in params.items()}
        new, self.velocity = sgd_step(current, grads, self.velocity, self.cfg, self.roles,
                                      self.cfg.lr_at(epoch), self.frozen, self.steps)
        for n, t in params.items():
            t.data = new[n]
        self.steps += 1
