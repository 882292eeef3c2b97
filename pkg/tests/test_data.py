import json
from collections import Counter

import numpy as np
import pytest

from rfop.data import (
    DataError,
    FeatureStore,
    PairSampler,
    SampleRecord,
    SyntheticSpec,
    build_trials,
    generate_synthetic,
    load_store,
    manifest_text,
    read_trials,
    sample_batch,
    save_store,
    split_identities,
    write_trials,
)
from rfop.losses import opl
from rfop.autograd import Tensor


def random_store(n, seed=0):
    rng = np.random.default_rng(seed)
    records, pos = [], 0
    for i in range(n):
        dim = int(rng.integers(1, 9))
        mod = ("face", "voice")[int(rng.integers(2))]
        records.append(SampleRecord(f"s{i}", f"id{rng.integers(20)}", f"L{rng.integers(1, 3)}", mod, dim, pos))
        pos += dim
    return FeatureStore(records, rng.normal(size=pos).astype("<f4"))


def round_trip(store, tmp_path, tag):
    m1, b1 = tmp_path / f"{tag}1.csv", tmp_path / f"{tag}1.bin"
    m2, b2 = tmp_path / f"{tag}2.csv", tmp_path / f"{tag}2.bin"
    save_store(store, m1, b1)
    loaded = load_store(m1, b1)
    save_store(loaded, m2, b2)
    assert m1.read_bytes() == m2.read_bytes()
    assert b1.read_bytes() == b2.read_bytes()
    assert loaded == store
    return loaded


class TestStoreIO:
    def test_empty(self, tmp_path):
        loaded = round_trip(FeatureStore(), tmp_path, "e")
        assert len(loaded) == 0
        assert (tmp_path / "e1.csv").read_text() == "sample_id,identity,language,modality,dim,offset\n"
        assert (tmp_path / "e1.bin").read_bytes() == b""

    def test_single_sample(self, tmp_path):
        store = FeatureStore([SampleRecord("a", "x", "L1", "face", 4, 0)], np.array([1.5, -2, 0.25, 3], "<f4"))
        loaded = round_trip(store, tmp_path, "one")
        np.testing.assert_array_equal(loaded.features([0]), [[1.5, -2, 0.25, 3]])
        assert loaded.features([0]).dtype == np.float64

    def test_thousand_random(self, tmp_path):
        store = random_store(1000)
        loaded = round_trip(store, tmp_path, "big")
        assert loaded.blob.tobytes() == store.blob.tobytes()

    def test_blob_is_little_endian_f4(self, tmp_path):
        store = FeatureStore([SampleRecord("a", "x", "L1", "voice", 2, 0)], np.array([1.0, -0.5], "<f4"))
        save_store(store, tmp_path / "m.csv", tmp_path / "b.bin")
        assert (tmp_path / "b.bin").read_bytes() == bytes.fromhex("0000803f000000bf")

    def test_out_of_bounds_names_record(self, tmp_path):
        (tmp_path / "m.csv").write_text("sample_id,identity,language,modality,dim,offset\nfarout,x,L1,face,4,2\n")
        (tmp_path / "b.bin").write_bytes(np.zeros(4, "<f4").tobytes())
        with pytest.raises(DataError, match="farout"):
            load_store(tmp_path / "m.csv", tmp_path / "b.bin")

    def test_duplicate_ids(self):
        recs = [SampleRecord("a", "x", "L1", "face", 1, 0), SampleRecord("a", "x", "L1", "face", 1, 1)]
        with pytest.raises(DataError, match="duplicate"):
            FeatureStore(recs, np.zeros(2, "<f4"))

    def test_overlap(self):
        recs = [SampleRecord("a", "x", "L1", "face", 2, 0), SampleRecord("b", "x", "L1", "face", 2, 1)]
        with pytest.raises(DataError, match="overlap"):
            FeatureStore(recs, np.zeros(3, "<f4"))

    @pytest.mark.parametrize(
        "row, line",
        [("a,x,L1,face,4", 2), ("a,x,L1,face,four,0", 2)],
    )
    def test_malformed_rows_report_line(self, tmp_path, row, line):
        text = "sample_id,identity,language,modality,dim,offset\n" + row + "\n"
        (tmp_path / "m.csv").write_text(text)
        (tmp_path / "b.bin").write_bytes(np.zeros(4, "<f4").tobytes())
        with pytest.raises(DataError, match=f"line {line}"):
            load_store(tmp_path / "m.csv", tmp_path / "b.bin")

    def test_malformed_later_line(self, tmp_path):
        text = "sample_id,identity,language,modality,dim,offset\na,x,L1,face,1,0\nb,x,L1,face,1\n"
        (tmp_path / "m.csv").write_text(text)
        (tmp_path / "b.bin").write_bytes(np.zeros(2, "<f4").tobytes())
        with pytest.raises(DataError, match="line 3"):
            load_store(tmp_path / "m.csv", tmp_path / "b.bin")

    def test_unknown_modality_and_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="modality"):
            FeatureStore([SampleRecord("a", "x", "L1", "smell", 1, 0)], np.zeros(1, "<f4"))
        with pytest.raises(DataError, match="no such file"):
            load_store(tmp_path / "nope.csv", tmp_path / "nope.bin")


class TestGenerator:
    def test_deterministic(self, small_spec):
        a, pa = generate_synthetic(small_spec)
        b, pb = generate_synthetic(small_spec)
        assert a == b
        assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)

    def test_layout(self, small_spec, small_store):
        n = small_spec.num_identities * len(small_spec.languages) * 2 * small_spec.samples_per_identity_per_language
        assert len(small_store) == n
        assert small_store.languages() == ["L1", "L2"]
        assert len(small_store.identities()) == small_spec.num_identities

    def test_noiseless_limit(self):
        spec = SyntheticSpec(num_identities=5, prototype_dim=3, face_dim=6, voice_dim=4, noise_sigma=1e-12, language_shift=0.0, seed=1)
        store, _ = generate_synthetic(spec)
        for modality in ("face", "voice"):
            for ident, idx in store.group(modality).items():
                x = store.features(idx)
                # equal up to float32 rounding of the stored blob
                np.testing.assert_allclose(x, np.broadcast_to(x[0], x.shape), rtol=0, atol=1e-6, err_msg=f"{modality} {ident}")

    def test_faces_ignore_language(self):
        spec = SyntheticSpec(num_identities=4, prototype_dim=3, face_dim=6, voice_dim=4, noise_sigma=1e-12, language_shift=5.0, seed=1)
        store, _ = generate_synthetic(spec)
        for ident, idx in store.group("face").items():
            x = store.features(idx)
            np.testing.assert_allclose(x, np.broadcast_to(x[0], x.shape), rtol=0, atol=1e-6)
        # voices move by the same language offset difference for every identity
        deltas = []
        for ident in store.identities():
            v1 = store.features(store.group("voice", "L1")[ident])[0]
            v2 = store.features(store.group("voice", "L2")[ident])[0]
            deltas.append(v2 - v1)
        for d in deltas[1:]:
            np.testing.assert_allclose(d, deltas[0], atol=1e-5)
        assert 0 < np.linalg.norm(deltas[0]) <= 2 * 5.0 + 1e-5

    def test_zero_shift_languages_match_in_law(self):
        n, sigma = 400, 0.1
        spec = SyntheticSpec(num_identities=4, prototype_dim=3, face_dim=6, voice_dim=5, noise_sigma=sigma, language_shift=0.0, samples_per_identity_per_language=n, seed=3)
        store, _ = generate_synthetic(spec)
        for ident in store.identities():
            m1 = store.features(store.group("voice", "L1")[ident]).mean(axis=0)
            m2 = store.features(store.group("voice", "L2")[ident]).mean(axis=0)
            # difference of two sample means: N(0, 2 sigma^2 / n) per coordinate
            assert np.all(np.abs(m1 - m2) < 5 * sigma * np.sqrt(2 / n))

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="num_identities"):
            SyntheticSpec(num_identities=3)
        with pytest.raises(ValueError):
            SyntheticSpec(noise_sigma=0.0)
        with pytest.raises(ValueError):
            SyntheticSpec(prototype_dim=200)

    def test_json(self):
        spec = SyntheticSpec(num_identities=10, languages=("en", "de"))
        assert SyntheticSpec.from_json(spec.to_json()) == spec
        with pytest.raises(ValueError, match="num_identities"):
            SyntheticSpec.from_json(json.dumps({"num_identities": 3}))
        with pytest.raises(ValueError, match="unknown"):
            SyntheticSpec.from_json(json.dumps({"bogus": 1}))

    def test_language_mix_extremes(self):
        base = dict(num_identities=4, prototype_dim=3, face_dim=6, voice_dim=4, noise_sigma=1e-12, language_shift=2.0, seed=9)
        full, _ = generate_synthetic(SyntheticSpec(language_mix=1.0, **base))
        for ident in full.identities():
            v1 = full.features(full.group("voice", "L1")[ident])
            v2 = full.features(full.group("voice", "L2")[ident])
            np.testing.assert_allclose(v1, v2, atol=1e-6)


class TestSplits:
    def test_identity_disjoint_fractions(self, small_store, small_splits):
        tr, va, te = (set(s.identities()) for s in small_splits)
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert len(te) == 6 and len(va) == 2 and len(tr) == 22
        assert tr | va | te == set(small_store.identities())

    def test_default_benchmark_sizes(self):
        spec = SyntheticSpec()
        ids = [f"id{i:03d}" for i in range(spec.num_identities)]
        store = FeatureStore([SampleRecord(f"{i}_f", i, "L1", "face", 1, n) for n, i in enumerate(ids)], np.zeros(len(ids), "<f4"))
        tr, va, te = split_identities(store, 0.2, 0.1, seed=0)
        assert (len(tr.identities()), len(va.identities()), len(te.identities())) == (180, 20, 50)


class TestSampler:
    def test_minimal_batch(self, small_splits):
        s = PairSampler(small_splits.train, "L1", P=2, K=1)
        b = sample_batch(small_splits.train, s, np.random.default_rng(0))
        assert b.face.shape[0] == b.voice.shape[0] == 2
        assert len(set(b.labels.tolist())) == 2

    def test_pairing_and_counts(self, small_splits):
        store = small_splits.train
        s = PairSampler(store, "L2", P=4, K=3)
        batches = list(s.epoch(np.random.default_rng(1)))
        assert len(batches) == s.steps_per_epoch() == s.num_pairs // 12
        for b in batches:
            counts = Counter(b.labels.tolist())
            assert len(counts) == 4 and set(counts.values()) == {3}
            for lab, fi, vi in zip(b.labels, b.face_index, b.voice_index):
                f, v = store.records[fi], store.records[vi]
                assert f.identity == v.identity == s.identities[lab]
                assert f.language == v.language == "L2"
                assert (f.modality, v.modality) == ("face", "voice")
            assert len(set(b.face_index.tolist())) == 12

    def test_opl_pairs_nonempty(self, small_splits):
        s = PairSampler(small_splits.train, "L1", P=4, K=2)
        rng = np.random.default_rng(2)
        for _ in range(50):
            b = sample_batch(small_splits.train, s, rng)
            lab = b.labels
            same = lab[:, None] == lab[None, :]
            iu = np.triu_indices(len(lab), 1)
            assert same[iu].any() and (~same[iu]).any()
            opl(Tensor(b.face[:, :4]), lab)

    def test_uniform_over_10k_batches(self, small_splits):
        s = PairSampler(small_splits.train, "L1", P=4, K=1)
        rng = np.random.default_rng(3)
        counts = Counter()
        n_batches = 10_000
        for _ in range(n_batches):
            counts.update(sample_batch(small_splits.train, s, rng).labels.tolist())
        N = len(s.eligible)
        p = s.P / N
        mean, sd = n_batches * p, np.sqrt(n_batches * p * (1 - p))
        assert set(counts) == set(range(N))
        assert all(abs(c - mean) <= 3 * sd for c in counts.values()), (counts, mean, sd)

    def test_insufficient(self, small_splits):
        with pytest.raises(DataError, match="need P"):
            PairSampler(small_splits.train, "L1", P=40, K=2)
        with pytest.raises(DataError):
            PairSampler(small_splits.train, "L1", P=2, K=7)

    def test_deterministic(self, small_splits):
        s = PairSampler(small_splits.train, "L1", P=4, K=2)
        a = [b.face_index.tobytes() for b in s.epoch(np.random.default_rng(4))]
        b = [b.face_index.tobytes() for b in s.epoch(np.random.default_rng(4))]
        assert a == b


class TestTrials:
    def test_labels_correct(self, small_store):
        trials = build_trials(small_store, "L1", 200, 300, np.random.default_rng(0))
        assert sum(t.label for t in trials) == 200 and len(trials) == 500
        assert len({(t.face_sample_id, t.voice_sample_id) for t in trials}) == 500
        for t in trials:
            f, v = small_store.record(t.face_sample_id), small_store.record(t.voice_sample_id)
            assert (f.modality, v.modality) == ("face", "voice")
            assert f.language == v.language == "L1"
            assert (f.identity == v.identity) == bool(t.label)

    def test_no_same(self, small_store):
        trials = build_trials(small_store, "L2", 0, 50, np.random.default_rng(0))
        assert all(t.label == 0 for t in trials)

    def test_deterministic(self, small_store):
        a = build_trials(small_store, "L1", 500, 500, np.random.default_rng(7))
        b = build_trials(small_store, "L1", 500, 500, np.random.default_rng(7))
        assert a == b

    def test_insufficient(self, small_store):
        with pytest.raises(DataError, match="same-identity"):
            build_trials(small_store, "L1", 10**6, 0, np.random.default_rng(0))
        one = small_store.subset(lambda r: r.identity == "id00")
        with pytest.raises(DataError, match=">= 2 identities"):
            build_trials(one, "L1", 1, 1, np.random.default_rng(0))

    def test_csv_round_trip(self, small_store, tmp_path):
        trials = build_trials(small_store, "L1", 5, 5, np.random.default_rng(0))
        write_trials(trials, tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "face_sample_id,voice_sample_id,label"
        assert read_trials(tmp_path / "t.csv") == trials

    def test_bad_trials_csv(self, tmp_path):
        (tmp_path / "t.csv").write_text("face_sample_id,voice_sample_id,label\na,b,2\n")
        with pytest.raises(DataError, match="line 2"):
            read_trials(tmp_path / "t.csv")


def test_manifest_offsets_count_elements():
    store = random_store(5, seed=1)
    rows = manifest_text(store).splitlines()[1:]
    offsets = [int(r.split(",")[5]) for r in rows]
    dims = [int(r.split(",")[4]) for r in rows]
    assert offsets == list(np.concatenate([[0], np.cumsum(dims)[:-1]]))
