"""Cross-modal trial scoring, ROC / EER and the train-language x test-language report.

A trial is accepted when ``score >= threshold``.  FAR is the fraction of
different-identity trials accepted, FRR the fraction of same-identity trials
rejected.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import DataError, FeatureStore, Trial
from .model import RFOPParams, embed_faces, embed_voices


class RocPoint(NamedTuple):
    threshold: float
    far: float
    frr: float


class EERResult(NamedTuple):
    eer_percent: float
    threshold: float


def _normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def cosine_scores(params: RFOPParams, face_feats: np.ndarray, voice_feats: np.ndarray) -> np.ndarray:
    """Row-wise cosine between projected face and voice latents."""
    xf = _normalize_rows(embed_faces(params, face_feats))
    xv = _normalize_rows(embed_voices(params, voice_feats))
    return np.sum(xf * xv, axis=1)


def trial_indices(store: FeatureStore, trials: Sequence[Trial]) -> tuple[np.ndarray, np.ndarray]:
    fi = np.empty(len(trials), dtype=np.int64)
    vi = np.empty(len(trials), dtype=np.int64)
    for n, t in enumerate(trials):
        fi[n] = store.index_of(t.face_sample_id)
        vi[n] = store.index_of(t.voice_sample_id)
        if store.records[fi[n]].modality != "face":
            raise DataError(f"trial {n}: {t.face_sample_id!r} is not a face sample")
        if store.records[vi[n]].modality != "voice":
            raise DataError(f"trial {n}: {t.voice_sample_id!r} is not a voice sample")
    return fi, vi


def score_trials(params: RFOPParams, store: FeatureStore, trials: Sequence[Trial]) -> list[Trial]:
    if not trials:
        return []
    fi, vi = trial_indices(store, trials)
    scores = cosine_scores(params, store.features(fi), store.features(vi))
    return [replace(t, score=float(s)) for t, s in zip(trials, scores)]


def _scores_labels(trials) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(trials, tuple) and len(trials) == 2 and not isinstance(trials[0], Trial):
        scores, labels = trials
    else:
        if any(t.score is None for t in trials):
            raise ValueError("every trial needs a score")
        scores = [t.score for t in trials]
        labels = [t.label for t in trials]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("need at least one same-identity and one different-identity trial")
    return scores, labels


def roc_curve(trials) -> list[RocPoint]:
    """FAR/FRR at -inf, every distinct score, and +inf, by increasing threshold.

    ``trials`` is a sequence of scored :class:`Trial` or a ``(scores, labels)``
    tuple with labels 1 = same identity.
    """
    scores, labels = _scores_labels(trials)
    same = np.sort(scores[labels])
    diff = np.sort(scores[~labels])
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    # FAR: diff >= t; FRR: same < t
    far = 1.0 - np.searchsorted(diff, thresholds, side="left") / diff.size
    frr = np.searchsorted(same, thresholds, side="left") / same.size
    return [RocPoint(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]


def compute_eer(trials) -> EERResult:
    """Equal error rate in percent, linearly interpolated between ROC points."""
    roc = roc_curve(trials)
    prev = roc[0]
    for pt in roc:
        gap = pt.far - pt.frr
        if gap == 0:
            return EERResult(100.0 * pt.far, pt.threshold)
        if gap < 0:
            g0 = prev.far - prev.frr
            s = g0 / (g0 - gap)
            rate = prev.far + s * (pt.far - prev.far)
            if math.isfinite(prev.threshold) and math.isfinite(pt.threshold):
                thr = prev.threshold + s * (pt.threshold - prev.threshold)
            else:
                thr = pt.threshold if math.isfinite(pt.threshold) else prev.threshold
            return EERResult(100.0 * rate, thr)
        prev = pt
    raise AssertionError("ROC never crosses; unreachable for two-class input")


def overall_score(cells: Sequence[float]) -> float:
    """Arithmetic mean of the four train/test EER cells."""
    cells = [float(c) for c in cells]
    if len(cells) != 4 or not all(math.isfinite(c) for c in cells):
        raise ValueError(f"expected four finite EER cells, got {cells}")
    return math.fsum(cells) / 4.0


def reconcile_overall(cells: Sequence[float], printed: float) -> str | None:
    """Note when a printed overall score disagrees with the mean of its cells."""
    mean = overall_score(cells)
    if f"{mean:.1f}" == f"{printed:.1f}":
        return None
    return (
        f"mean of cells {tuple(cells)} is {mean:g} ({mean:.1f} at one decimal), "
        f"printed overall is {printed:.1f}; the printed value was likely averaged "
        f"from unrounded cells"
    )


@dataclass
class EvalMatrix:
    """EER percentages keyed by (train_lang, test_lang)."""

    cells: dict[tuple[str, str], float]

    @property
    def overall(self) -> float:
        return overall_score(list(self.cells.values())) if len(self.cells) == 4 else _mean(self.cells.values())

    def rows(self) -> list[tuple[str, str, str]]:
        out = [(tr, te, f"{v:.1f}") for (tr, te), v in self.cells.items()]
        out.append(("overall", "", f"{self.overall:.1f}"))
        return out

    def to_csv(self) -> str:
        return report_csv(self.rows())

    def table(self) -> str:
        trains = list(dict.fromkeys(tr for tr, _ in self.cells))
        tests = list(dict.fromkeys(te for _, te in self.cells))
        lines = ["train \\ test | " + " | ".join(tests)]
        for tr in trains:
            vals = [f"{self.cells[(tr, te)]:.1f}" if (tr, te) in self.cells else "-" for te in tests]
            lines.append(f"{tr} | " + " | ".join(vals))
        lines.append(f"overall | {self.overall:.1f}")
        return "\n".join(lines)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


REPORT_HEADER = ["train_lang", "test_lang", "eer"]


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def cross_config_report(
    runs: Mapping[str, RFOPParams],
    test_sets: Mapping[str, tuple[FeatureStore, Sequence[Trial]]],
) -> EvalMatrix:
    """EER of every trained model (keyed by train language) on every test split."""
    if not runs or not test_sets:
        raise ValueError("need at least one trained model and one test split")
    cells = {}
    for train_lang, params in runs.items():
        if params is None:
            raise ValueError(f"missing model for train language {train_lang!r}")
        for test_lang, split in test_sets.items():
            if split is None:
                raise ValueError(f"missing test split {test_lang!r}")
            store, trials = split
            cells[(train_lang, test_lang)] = compute_eer(score_trials(params, store, trials)).eer_percent
    return EvalMatrix(cells)


def write_report(matrix: EvalMatrix, path) -> None:
    Path(path).write_text(matrix.to_csv(), encoding="utf-8", newline="")


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``score,label`` CSV."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    reader = csv.reader(io.StringIO(path.read_text(encoding="utf-8"), newline=""))
    if next(reader, None) != ["score", "label"]:
        raise DataError(f"{path}: expected header score,label")
    scores, labels = [], []
    for row in reader:
        try:
            s = float(row[0])
            lab = int(row[1])
        except (IndexError, ValueError):
            raise DataError(f"{path}, line {reader.line_num}: malformed row {row}") from None
        if len(row) != 2 or lab not in (0, 1) or not math.isfinite(s):
            raise DataError(f"{path}, line {reader.line_num}: malformed row {row}")
        scores.append(s)
        labels.append(lab)
    return np.array(scores), np.array(labels)
