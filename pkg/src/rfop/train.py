"""Epoch loop, best-checkpoint selection and the two-phase training recipe."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import backward
from .data import FeatureStore, PairSampler, Trial, build_trials
from .losses import LossWeights, total_loss
from .metrics import compute_eer, cosine_scores, trial_indices
from .model import ModelConfig, RFOPParams, forward, init_params
from .optim import AdamWState, CosineSchedule, adamw_step, lr_at

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    lr_max: float
    lr_min: float = 0.0

    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.lr_max, self.lr_min, self.epochs)


@dataclass(frozen=True)
class TrainPlan:
    phase1: PhaseConfig = PhaseConfig(50, 0.01)
    phase2: PhaseConfig = PhaseConfig(50, 0.0001)
    batch_size: int = 64
    identities_per_batch: int = 16
    weight_decay: float = 0.2
    seed: int = 0
    val_same: int = 1000
    val_diff: int = 1000

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        P = self.identities_per_batch
        if P < 2 or self.batch_size % P:
            raise ValueError(f"batch_size {self.batch_size} must be a multiple of identities_per_batch {P} >= 2")
        if self.phase1.epochs < 1 or self.phase2.epochs < 0:
            raise ValueError("phase 1 needs >= 1 epoch and phase 2 >= 0")

    @property
    def samples_per_identity(self) -> int:
        return self.batch_size // self.identities_per_batch


@dataclass
class CheckpointRecord:
    phase: int
    epoch: int
    val_eer: float
    params: dict[str, np.ndarray] | None = None


@dataclass(frozen=True)
class LogRow:
    phase: int
    epoch: int
    lr: float
    l_total: float
    l_mse: float
    l_op: float
    l_ce: float
    val_eer: float


LOG_HEADER = ["phase", "epoch", "lr", "l_total", "l_mse", "l_op", "l_ce", "val_eer"]


def log_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r.phase, r.epoch, repr(r.lr), repr(r.l_total), repr(r.l_mse), repr(r.l_op), repr(r.l_ce), repr(r.val_eer)])
    return buf.getvalue()


def write_log(rows: Sequence[LogRow], path) -> None:
    Path(path).write_text(log_csv(rows), encoding="utf-8", newline="")


class Validator:
    """Scores a fixed validation trial list with the current projections."""

    def __init__(self, store: FeatureStore, trials: Sequence[Trial]):
        fi, vi = trial_indices(store, trials)
        self.face = store.features(fi)
        self.voice = store.features(vi)
        self.labels = np.array([t.label for t in trials], dtype=np.int64)

    def eer(self, params: RFOPParams) -> float:
        scores = cosine_scores(params, self.face, self.voice)
        return compute_eer((scores, self.labels)).eer_percent


@dataclass
class TrainingData:
    sampler: PairSampler
    validator: Validator

    @classmethod
    def from_stores(cls, train: FeatureStore, validation: FeatureStore, language: str, plan: TrainPlan):
        sampler = PairSampler(train, language, P=plan.identities_per_batch, K=plan.samples_per_identity)
        trials = _validation_trials(validation, language, plan)
        return cls(sampler, Validator(validation, trials))


def _validation_trials(store: FeatureStore, language: str, plan: TrainPlan) -> list[Trial]:
    faces = store.group("face", language)
    voices = store.group("voice", language)
    idents = sorted(set(faces) & set(voices))
    n_same_max = sum(len(faces[i]) * len(voices[i]) for i in idents)
    n_face = sum(len(faces[i]) for i in idents)
    n_voice = sum(len(voices[i]) for i in idents)
    n_diff_max = n_face * n_voice - n_same_max
    rng = np.random.default_rng([plan.seed, 1])
    return build_trials(store, language, min(plan.val_same, n_same_max), min(plan.val_diff, n_diff_max), rng)


def select_best(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Lowest validation EER; the earliest record wins ties."""
    if not records:
        raise ValueError("select_best needs at least one record")
    best = records[0]
    for r in records[1:]:
        if r.val_eer < best.val_eer:
            best = r
    return best


def run_phase(
    params: RFOPParams,
    data: TrainingData,
    phase: PhaseConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    weight_decay: float = 0.2,
    phase_index: int = 1,
    keep_all: bool = False,
    step_losses: list[float] | None = None,
) -> tuple[list[CheckpointRecord], list[LogRow]]:
    """Train ``params`` in place for one phase with a fresh optimiser.

    Returns one checkpoint record and one log row per epoch.  Only the best
    record so far keeps its parameter snapshot unless ``keep_all``.
    """
    schedule = phase.schedule()
    tensors = params.tensors()
    state = AdamWState.for_params(tensors, weight_decay=weight_decay)
    records: list[CheckpointRecord] = []
    rows: list[LogRow] = []
    best: CheckpointRecord | None = None
    for e in range(phase.epochs):
        lr = lr_at(schedule, e)
        sums = np.zeros(4)
        n = 0
        for batch in data.sampler.epoch(rng):
            params.zero_grad()
            out = forward(params, batch.face, batch.voice)
            losses = total_loss(out.latent, out.fused, out.logits, batch.labels, weights)
            value = losses.total.item()
            if not math.isfinite(value):
                raise NumericalAbort(f"phase {phase_index}, epoch {e + 1}: loss became {value}")
            backward(losses.total)
            adamw_step(tensors, [t.grad for t in tensors], state, lr)
            sums += (value, losses.mse, losses.opl, losses.ce)
            n += 1
            if step_losses is not None:
                step_losses.append(value)
        val = data.validator.eer(params)
        rec = CheckpointRecord(phase_index, e + 1, val)
        if keep_all or best is None or val < best.val_eer:
            rec.params = params.state()
            if best is not None and not keep_all:
                best.params = None
            if best is None or val < best.val_eer:
                best = rec
        records.append(rec)
        means = sums / max(n, 1)
        rows.append(LogRow(phase_index, e + 1, lr, *map(float, means), val))
        log.debug("phase %d epoch %d lr %.3g loss %.4f val EER %.2f", phase_index, e + 1, lr, means[0], val)
    params.zero_grad()
    return records, rows


@dataclass
class TrainResult:
    params: RFOPParams
    best: CheckpointRecord
    phase1_best: CheckpointRecord
    records: list[CheckpointRecord] = field(default_factory=list)
    log: list[LogRow] = field(default_factory=list)
    phase2_init: dict[str, np.ndarray] | None = None


def two_phase_train(
    plan: TrainPlan,
    data: TrainingData,
    model_config: ModelConfig,
    weights: LossWeights = LossWeights(),
) -> TrainResult:
    """Phase 1 at ``plan.phase1.lr_max``; restart from its best epoch for phase 2.

    Phase 2 gets a fresh cosine schedule and fresh optimiser moments.  The
    returned parameters are those of the best validation epoch over both phases.
    """
    rng = np.random.default_rng(plan.seed)
    params = init_params(model_config)
    rec1, log1 = run_phase(params, data, plan.phase1, weights, rng, plan.weight_decay, phase_index=1)
    best1 = select_best(rec1)
    records, rows = list(rec1), list(log1)
    phase2_init = None
    best = best1
    if plan.phase2.epochs:
        params.load_state(best1.params)
        phase2_init = params.state()
        rec2, log2 = run_phase(params, data, plan.phase2, weights, rng, plan.weight_decay, phase_index=2)
        records += rec2
        rows += log2
        best = select_best(records)
    params.load_state(best.params)
    return TrainResult(params, best, best1, records, rows, phase2_init)
