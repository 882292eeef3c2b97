"""The desk-scale synthetic cross-lingual benchmark, end to end."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FeatureStore, Splits, SyntheticSpec, Trial, build_trials, generate_synthetic, split_identities
from .losses import LossWeights
from .metrics import EvalMatrix, compute_eer, cross_config_report, score_trials
from .model import ModelConfig
from .train import TrainingData, TrainPlan, TrainResult, two_phase_train

TEST_FRACTION = 0.2
VAL_FRACTION = 0.1


def make_splits(spec: SyntheticSpec) -> Splits:
    """Generate the store and split identities into train / validation / test."""
    store, _ = generate_synthetic(spec)
    return split_identities(store, TEST_FRACTION, VAL_FRACTION, seed=spec.seed)


def make_test_trials(store: FeatureStore, language: str, seed: int, n_same: int = 2000, n_diff: int = 2000) -> list[Trial]:
    rng = np.random.default_rng([seed, 2, sum(map(ord, language))])
    return build_trials(store, language, n_same, n_diff, rng)


def model_config_for(spec: SyntheticSpec, train: FeatureStore, latent_dim: int = 128, seed: int = 0) -> ModelConfig:
    return ModelConfig(
        face_dim=spec.face_dim,
        voice_dim=spec.voice_dim,
        latent_dim=latent_dim,
        num_identities=len(train.identities()),
        seed=seed,
    )


@dataclass
class BenchmarkResult:
    matrix: EvalMatrix
    runs: dict[str, TrainResult] = field(default_factory=dict)


def run_benchmark(
    spec: SyntheticSpec = SyntheticSpec(),
    plan: TrainPlan | None = None,
    weights: LossWeights = LossWeights(),
    train_languages: tuple[str, ...] | None = None,
    latent_dim: int = 128,
) -> BenchmarkResult:
    """Train one model per training language and evaluate it on every language."""
    plan = plan or TrainPlan(seed=spec.seed)
    splits = make_splits(spec)
    train_languages = train_languages or spec.languages
    runs: dict[str, TrainResult] = {}
    for lang in train_languages:
        data = TrainingData.from_stores(splits.train, splits.validation, lang, plan)
        cfg = model_config_for(spec, splits.train, latent_dim, seed=spec.seed)
        runs[lang] = two_phase_train(plan, data, cfg, weights)
    tests = {lang: (splits.test, make_test_trials(splits.test, lang, spec.seed)) for lang in spec.languages}
    matrix = cross_config_report({lang: r.params for lang, r in runs.items()}, tests)
    return BenchmarkResult(matrix, runs)


def eer_on(result: TrainResult, store: FeatureStore, trials) -> float:
    return compute_eer(score_trials(result.params, store, trials)).eer_percent
