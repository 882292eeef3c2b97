"""AdamW with decoupled weight decay and a per-epoch cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamWState:
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamWState":
        state = cls(**kw)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState, lr: float) -> None:
    """One in-place AdamW update.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    A ``None`` gradient counts as zero.  Refuses (and leaves everything
    untouched) if any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    gs = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"grad {i}: shape {g.shape} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i}; step refused")
        gs.append(g)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= lr * update


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 0.01
    lr_min: float = 0.0
    total_epochs: int = 50

    def __post_init__(self):
        if not self.lr_max > 0 or not 0 <= self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 <= lr_min <= lr_max and lr_max > 0, got {self.lr_min}, {self.lr_max}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")


def lr_at(schedule: CosineSchedule, epoch: int) -> float:
    T = schedule.total_epochs
    if not 0 <= epoch <= T:
        raise ValueError(f"epoch {epoch} outside [0, {T}]")
    # exact endpoints; the cosine formula is off by an ulp for some lr_min
    if epoch == 0:
        return schedule.lr_max
    if epoch == T:
        return schedule.lr_min
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * epoch / T))
