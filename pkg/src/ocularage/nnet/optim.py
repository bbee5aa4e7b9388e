"""Adam with decoupled weight decay and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.01) -> AdamState:
    """Update ``params`` in place and return the advanced state.

    Weight decay is decoupled: each parameter is first scaled by
    ``1 - lr * weight_decay`` and then moved by the bias-corrected Adam step.
    """
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        if weight_decay:
            p *= (1.0 - lr * weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    state.step = t
    return state


@dataclass(frozen=True)
class ScheduleState:
    base_lr: float = 0.001
    min_lr: float = 1e-5
    t0: int = 10
    mult: float = 2.0
    epoch_in_cycle: int = 0
    cycle_length: int | None = None

    @property
    def period(self) -> int:
        return self.t0 if self.cycle_length is None else self.cycle_length

    def advance(self) -> "ScheduleState":
        """State for the next epoch; restarts the cycle once it reaches its length."""
        e = self.epoch_in_cycle + 1
        if e >= self.period:
            return replace(self, epoch_in_cycle=0,
                           cycle_length=max(1, int(round(self.period * self.mult))))
        return replace(self, epoch_in_cycle=e)


def scheduled_lr(state: ScheduleState) -> float:
    if state.epoch_in_cycle >= state.period:
        return state.base_lr
    frac = state.epoch_in_cycle / state.period
    return state.min_lr + 0.5 * (state.base_lr - state.min_lr) * (1.0 + math.cos(math.pi * frac))
