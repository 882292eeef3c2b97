"""Feature stores, the synthetic multilingual generator, batch sampling and trials.

On disk a store is two files:

* manifest -- UTF-8 CSV with header ``sample_id,identity,language,modality,dim,offset``
  where ``offset`` counts blob elements;
* blob -- contiguous little-endian float32 values.

Values are widened to float64 when read for computation.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MANIFEST_HEADER = ["sample_id", "identity", "language", "modality", "dim", "offset"]
MODALITIES = ("face", "voice")


class DataError(ValueError):
    """Malformed, inconsistent or insufficient feature data."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    identity: str
    language: str
    modality: str
    dim: int
    offset: int


class FeatureStore:
    """Immutable manifest + float32 blob of pre-extracted feature vectors."""

    def __init__(self, records: Sequence[SampleRecord] = (), blob=None):
        self.records: tuple[SampleRecord, ...] = tuple(records)
        self.blob = np.ascontiguousarray(np.zeros(0) if blob is None else blob, dtype="<f4")
        self.blob.setflags(write=False)
        self._by_id = {}
        for i, r in enumerate(self.records):
            if r.sample_id in self._by_id:
                raise DataError(f"duplicate sample_id {r.sample_id!r}")
            if r.modality not in MODALITIES:
                raise DataError(f"sample {r.sample_id!r}: unknown modality {r.modality!r}")
            if r.dim < 1 or r.offset < 0 or r.offset + r.dim > self.blob.size:
                raise DataError(
                    f"sample {r.sample_id!r}: range [{r.offset}, {r.offset + r.dim}) "
                    f"outside blob of {self.blob.size} values"
                )
            self._by_id[r.sample_id] = i
        spans = sorted((r.offset, r.offset + r.dim, r.sample_id) for r in self.records)
        for (s0, e0, a), (s1, _, b) in zip(spans, spans[1:]):
            if s1 < e0:
                raise DataError(f"samples {a!r} and {b!r} overlap in the blob")
        self._offsets = np.array([r.offset for r in self.records], dtype=np.int64)
        self._dims = np.array([r.dim for r in self.records], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureStore)
            and self.records == other.records
            and self.blob.tobytes() == other.blob.tobytes()
        )

    def index_of(self, sample_id: str) -> int:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise DataError(f"unknown sample_id {sample_id!r}") from None

    def record(self, sample_id: str) -> SampleRecord:
        return self.records[self.index_of(sample_id)]

    def features(self, indices) -> np.ndarray:
        """Stack the vectors of the given record indices into a float64 matrix."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            return np.zeros((0, 0))
        dims = self._dims[idx]
        if np.any(dims != dims[0]):
            raise DataError("requested samples have differing dimensions")
        gather = self._offsets[idx, None] + np.arange(dims[0])
        return self.blob[gather].astype(np.float64)

    def identities(self) -> list[str]:
        return sorted({r.identity for r in self.records})

    def languages(self) -> list[str]:
        return sorted({r.language for r in self.records})

    def group(self, modality: str, language: str | None = None) -> dict[str, list[int]]:
        """identity -> record indices for one modality (optionally one language)."""
        out: dict[str, list[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            if r.modality == modality and (language is None or r.language == language):
                out[r.identity].append(i)
        return dict(out)

    def subset(self, keep) -> "FeatureStore":
        """New store holding the records for which ``keep(record)`` is true, compacted."""
        records, chunks, pos = [], [], 0
        for r in self.records:
            if keep(r):
                chunks.append(self.blob[r.offset : r.offset + r.dim])
                records.append(SampleRecord(r.sample_id, r.identity, r.language, r.modality, r.dim, pos))
                pos += r.dim
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
        return FeatureStore(records, blob)


# ---------------------------------------------------------------------------
# disk format


def manifest_text(store: FeatureStore) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in store.records:
        w.writerow([r.sample_id, r.identity, r.language, r.modality, r.dim, r.offset])
    return buf.getvalue()


def save_store(store: FeatureStore, manifest_path, blob_path) -> None:
    Path(manifest_path).write_text(manifest_text(store), encoding="utf-8", newline="")
    Path(blob_path).write_bytes(store.blob.astype("<f4").tobytes())


def parse_manifest(text: str, source: str = "manifest") -> list[SampleRecord]:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{source}: empty file, expected header") from None
    if header != MANIFEST_HEADER:
        raise DataError(f"{source}: bad header {header}, expected {MANIFEST_HEADER}")
    records = []
    for row in reader:
        line = reader.line_num
        if len(row) != len(MANIFEST_HEADER):
            raise DataError(f"{source}, line {line}: expected 6 fields, got {len(row)}")
        try:
            dim, offset = int(row[4]), int(row[5])
        except ValueError:
            raise DataError(f"{source}, line {line}: dim and offset must be integers") from None
        records.append(SampleRecord(row[0], row[1], row[2], row[3], dim, offset))
    return records


def load_store(manifest_path, blob_path) -> FeatureStore:
    manifest_path, blob_path = Path(manifest_path), Path(blob_path)
    for p in (manifest_path, blob_path):
        if not p.is_file():
            raise DataError(f"no such file: {p}")
    records = parse_manifest(manifest_path.read_text(encoding="utf-8"), str(manifest_path))
    raw = blob_path.read_bytes()
    if len(raw) % 4:
        raise DataError(f"{blob_path}: size {len(raw)} is not a multiple of 4 bytes")
    return FeatureStore(records, np.frombuffer(raw, dtype="<f4"))


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the Gaussian-prototype generator.

    ``language_mix`` is the fraction of each non-first language's voice
    samples that carry the first language's offset instead of their own,
    emulating mixed-language recordings.
    """

    num_identities: int = 250
    prototype_dim: int = 32
    face_dim: int = 128
    voice_dim: int = 64
    languages: tuple[str, ...] = ("L1", "L2")
    noise_sigma: float = 0.1
    language_shift: float = 1.0
    samples_per_identity_per_language: int = 8
    seed: int = 42
    language_mix: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        if self.num_identities < 4:
            raise ValueError(f"num_identities must be >= 4, got {self.num_identities}")
        if self.prototype_dim < 1:
            raise ValueError("prototype_dim must be positive")
        if self.face_dim < self.prototype_dim or self.voice_dim < self.prototype_dim:
            raise ValueError("face_dim and voice_dim must be >= prototype_dim")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if not self.language_shift >= 0:
            raise ValueError("language_shift must be >= 0")
        if not self.languages or len(set(self.languages)) != len(self.languages):
            raise ValueError("languages must be a non-empty list of distinct names")
        if self.samples_per_identity_per_language < 1:
            raise ValueError("samples_per_identity_per_language must be positive")
        if not 0.0 <= self.language_mix <= 1.0:
            raise ValueError("language_mix must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValueError("synthetic spec must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        d = asdict(self)
        d["languages"] = list(self.languages)
        return json.dumps(d, indent=2, sort_keys=True)


def _orthonormal_map(rng: np.random.Generator, out_dim: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((out_dim, k)))
    # sign-fix so the map is a deterministic function of the draw
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureStore, dict[str, np.ndarray]]:
    """Draw a multilingual face/voice feature store and its identity prototypes.

    Each identity gets a prototype ``z ~ N(0, I_k)``.  Faces are
    ``A_f z + sigma * noise`` and voices ``A_v z + shift * u_lang + sigma * noise``
    where ``A_f``, ``A_v`` are random maps with orthonormal columns scaled by
    ``1/sqrt(k)`` (so the identity signal has unit expected norm) and ``u_lang``
    is a random unit vector per language drawn inside the span of ``A_v``, so
    the language offset competes with identity directions instead of sitting
    in an orthogonal complement a linear projection could simply discard.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.prototype_dim
    A_f = _orthonormal_map(rng, spec.face_dim, k) / math.sqrt(k)
    A_v = _orthonormal_map(rng, spec.voice_dim, k) / math.sqrt(k)
    offsets = {}
    for lang in spec.languages:
        u = A_v @ rng.standard_normal(k)
        offsets[lang] = u / np.linalg.norm(u)
    first = spec.languages[0]

    width = len(str(spec.num_identities - 1))
    records: list[SampleRecord] = []
    chunks: list[np.ndarray] = []
    prototypes: dict[str, np.ndarray] = {}
    pos = 0
    n = spec.samples_per_identity_per_language
    for i in range(spec.num_identities):
        ident = f"id{i:0{width}d}"
        z = rng.standard_normal(k)
        prototypes[ident] = z
        face_mean = A_f @ z
        voice_mean = A_v @ z
        for lang in spec.languages:
            faces = face_mean + spec.noise_sigma * rng.standard_normal((n, spec.face_dim))
            mixed = rng.random(n) < spec.language_mix if lang != first else np.zeros(n, dtype=bool)
            shift = np.where(mixed[:, None], offsets[first], offsets[lang]) * spec.language_shift
            voices = voice_mean + shift + spec.noise_sigma * rng.standard_normal((n, spec.voice_dim))
            for modality, block in (("face", faces), ("voice", voices)):
                dim = block.shape[1]
                for j in range(n):
                    sid = f"{ident}_{lang}_{modality[0]}{j}"
                    records.append(SampleRecord(sid, ident, lang, modality, dim, pos))
                    pos += dim
                chunks.append(block.reshape(-1))
    blob = np.concatenate(chunks).astype("<f4")
    return FeatureStore(records, blob), prototypes


class Splits(NamedTuple):
    train: FeatureStore
    validation: FeatureStore
    test: FeatureStore


def split_identities(
    store: FeatureStore,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> Splits:
    """Identity-disjoint train / validation / test stores.

    ``test_fraction`` of all identities are held out for testing, then
    ``val_fraction`` of the remaining (training) identities for validation.
    """
    ids = store.identities()
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(test_fraction * len(ids)))
    test_ids = set(order[:n_test])
    rest = order[n_test:]
    n_val = max(1, int(round(val_fraction * len(rest)))) if val_fraction > 0 else 0
    val_ids = set(rest[:n_val])
    train_ids = set(rest[n_val:])
    return Splits(
        store.subset(lambda r: r.identity in train_ids),
        store.subset(lambda r: r.identity in val_ids),
        store.subset(lambda r: r.identity in test_ids),
    )


# ---------------------------------------------------------------------------
# batches


class Batch(NamedTuple):
    face: np.ndarray  # B x Df
    voice: np.ndarray  # B x Dv
    labels: np.ndarray  # B identity indices
    face_index: np.ndarray
    voice_index: np.ndarray


@dataclass
class PairSampler:
    """Draws P identities x K paired face/voice samples from one language."""

    store: FeatureStore
    language: str
    P: int = 16
    K: int = 4
    identities: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.P < 2 or self.K < 1:
            raise ValueError(f"need P >= 2 and K >= 1, got P={self.P}, K={self.K}")
        faces = self.store.group("face", self.language)
        voices = self.store.group("voice", self.language)
        if not self.identities:
            self.identities = sorted(set(faces) & set(voices))
        self.label_of = {ident: i for i, ident in enumerate(self.identities)}
        self._faces = {i: np.array(faces.get(i, []), dtype=np.int64) for i in self.identities}
        self._voices = {i: np.array(voices.get(i, []), dtype=np.int64) for i in self.identities}
        self.eligible = [
            i for i in self.identities if len(self._faces[i]) >= self.K and len(self._voices[i]) >= self.K
        ]
        if len(self.eligible) < self.P:
            raise DataError(
                f"language {self.language!r}: only {len(self.eligible)} identities have "
                f">= {self.K} face and voice samples, need P={self.P}"
            )

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    @property
    def num_pairs(self) -> int:
        return sum(min(len(self._faces[i]), len(self._voices[i])) for i in self.eligible)

    def steps_per_epoch(self) -> int:
        return max(1, self.num_pairs // self.batch_size)

    def batch_for(self, chosen: Sequence[str], rng: np.random.Generator) -> Batch:
        face_idx, voice_idx, labels = [], [], []
        for ident in chosen:
            face_idx.append(rng.choice(self._faces[ident], size=self.K, replace=False))
            voice_idx.append(rng.choice(self._voices[ident], size=self.K, replace=False))
            labels.extend([self.label_of[ident]] * self.K)
        fi = np.concatenate(face_idx)
        vi = np.concatenate(voice_idx)
        return Batch(self.store.features(fi), self.store.features(vi), np.array(labels, dtype=np.int64), fi, vi)

    def epoch(self, rng: np.random.Generator) -> Iterator[Batch]:
        """``steps_per_epoch`` batches; identities are dealt from reshuffled decks."""
        deck: list[str] = []
        for _ in range(self.steps_per_epoch()):
            chosen: list[str] = []
            while len(chosen) < self.P:
                if not deck:
                    deck = [self.eligible[i] for i in rng.permutation(len(self.eligible))]
                ident = deck.pop()
                if ident not in chosen:
                    chosen.append(ident)
            yield self.batch_for(chosen, rng)


def sample_batch(store: FeatureStore, sampler: PairSampler, rng: np.random.Generator) -> Batch:
    """One batch of P identities drawn uniformly without replacement."""
    if store is not sampler.store:
        raise ValueError("sampler was built for a different store")
    pick = rng.choice(len(sampler.eligible), size=sampler.P, replace=False)
    return sampler.batch_for([sampler.eligible[i] for i in pick], rng)


# ---------------------------------------------------------------------------
# verification trials


@dataclass(frozen=True)
class Trial:
    face_sample_id: str
    voice_sample_id: str
    label: int  # 1 same identity, 0 different
    score: float | None = None


def build_trials(
    store: FeatureStore,
    language: str,
    n_same: int,
    n_diff: int,
    rng: np.random.Generator,
) -> list[Trial]:
    """Same- and different-identity face/voice pairs from one language.

    Pairs are drawn uniformly without replacement from all admissible
    (face, voice) combinations.  Same trials come first, then different ones.
    """
    faces = store.group("face", language)
    voices = store.group("voice", language)
    idents = sorted(set(faces) & set(voices))
    if len(idents) < 2:
        raise DataError(f"language {language!r}: need >= 2 identities with both modalities, found {len(idents)}")

    same_pool = [(f, v) for i in idents for f, v in itertools.product(faces[i], voices[i])]
    if n_same > len(same_pool):
        raise DataError(f"requested {n_same} same-identity trials but only {len(same_pool)} exist")
    chosen_same = [same_pool[j] for j in rng.choice(len(same_pool), size=n_same, replace=False)]

    all_faces = np.array([f for i in idents for f in faces[i]], dtype=np.int64)
    all_voices = np.array([v for i in idents for v in voices[i]], dtype=np.int64)
    face_owner = np.array([store.records[f].identity for f in all_faces])
    voice_owner = np.array([store.records[v].identity for v in all_voices])
    n_diff_total = len(all_faces) * len(all_voices) - len(same_pool)
    if n_diff > n_diff_total:
        raise DataError(f"requested {n_diff} different-identity trials but only {n_diff_total} exist")
    chosen_diff: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(chosen_diff) < n_diff:
        need = n_diff - len(chosen_diff)
        fi = rng.integers(len(all_faces), size=2 * need + 8)
        vi = rng.integers(len(all_voices), size=2 * need + 8)
        for a, b in zip(fi, vi):
            if face_owner[a] == voice_owner[b]:
                continue
            pair = (int(all_faces[a]), int(all_voices[b]))
            if pair in seen:
                continue
            seen.add(pair)
            chosen_diff.append(pair)
            if len(chosen_diff) == n_diff:
                break

    recs = store.records
    trials = [Trial(recs[f].sample_id, recs[v].sample_id, 1) for f, v in chosen_same]
    trials += [Trial(recs[f].sample_id, recs[v].sample_id, 0) for f, v in chosen_diff]
    return trials


TRIALS_HEADER = ["face_sample_id", "voice_sample_id", "label"]


def write_trials(trials: Sequence[Trial], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIALS_HEADER)
    for t in trials:
        w.writerow([t.face_sample_id, t.voice_sample_id, int(t.label)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_trials(path) -> list[Trial]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    reader = csv.reader(io.StringIO(path.read_text(encoding="utf-8"), newline=""))
    header = next(reader, None)
    if header != TRIALS_HEADER:
        raise DataError(f"{path}: bad header {header}, expected {TRIALS_HEADER}")
    trials = []
    for row in reader:
        if len(row) != 3 or row[2] not in ("0", "1"):
            raise DataError(f"{path}, line {reader.line_num}: malformed trial row {row}")
        trials.append(Trial(row[0], row[1], int(row[2])))
    return trials
