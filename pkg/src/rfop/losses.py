"""Alignment, orthogonal projection and cross-entropy losses, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import LatentPair

OPL_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    mse: float = 0.02
    opl: float = 0.78
    ce: float = 0.2

    def __post_init__(self):
        for name in ("mse", "opl", "ce"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v!r}")


class LossBreakdown(NamedTuple):
    total: Tensor
    mse: float
    opl: float
    ce: float


def _labels(labels, num_rows: int) -> np.ndarray:
    ids = np.asarray(labels, dtype=np.int64).reshape(-1)
    if ids.shape[0] != num_rows:
        raise ValueError(f"expected {num_rows} labels, got {ids.shape[0]}")
    return ids


def mse_alignment(latent: LatentPair) -> Tensor:
    """Mean over all B*d entries of (Xf - Xv)^2."""
    return ag.mean_all(ag.square(ag.sub(latent.Xf, latent.Xv)))


def opl(fused: Tensor, labels) -> Tensor:
    """Batch orthogonal projection loss on row-normalised embeddings.

    ``(1 - mean cos over same-identity pairs) + mean |cos| over cross-identity
    pairs``; a term whose pair set is empty is dropped.
    """
    B = fused.shape[0]
    if B < 2:
        raise ValueError(f"opl needs at least 2 embeddings, got {B}")
    ids = _labels(labels, B)
    f = ag.l2_normalize(fused, OPL_EPS)
    gram = ag.matmul(f, ag.transpose(f))
    same = ids[:, None] == ids[None, :]
    upper = np.triu(np.ones((B, B), dtype=bool), k=1)
    pos = (same & upper).astype(np.float64)
    neg = (~same & upper).astype(np.float64)
    loss = None
    if pos.sum() > 0:
        s = ag.scale(ag.sum_all(ag.mul(gram, Tensor(pos))), 1.0 / pos.sum())
        loss = ag.sub(1.0, s)
    if neg.sum() > 0:
        dv = ag.scale(ag.sum_all(ag.mul(ag.absolute(gram), Tensor(neg))), 1.0 / neg.sum())
        loss = dv if loss is None else ag.add(loss, dv)
    return loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    ids = _labels(labels, logits.shape[0])
    C = logits.shape[1]
    if np.any(ids < 0) or np.any(ids >= C):
        bad = ids[(ids < 0) | (ids >= C)][0]
        raise ValueError(f"label {bad} outside [0, {C})")
    return ag.scale(ag.mean_all(ag.pick(ag.log_softmax(logits), ids)), -1.0)


def combine(weights: LossWeights, l_mse: Tensor, l_opl: Tensor, l_ce: Tensor) -> Tensor:
    return ag.add(
        ag.add(ag.scale(l_mse, weights.mse), ag.scale(l_opl, weights.opl)),
        ag.scale(l_ce, weights.ce),
    )


def total_loss(latent: LatentPair, fused: Tensor, logits: Tensor, labels, weights: LossWeights) -> LossBreakdown:
    l_mse = mse_alignment(latent)
    l_opl = opl(fused, labels)
    l_ce = cross_entropy(logits, labels)
    total = combine(weights, l_mse, l_opl, l_ce)
    return LossBreakdown(total, l_mse.item(), l_opl.item(), l_ce.item())
