import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medpatch.data import (CONDITION_PREVALENCE, Dataset, GeneratorConfig, ModalityTokens, Sample,
                           chunk_pool_document, generate_dataset, largest_remainder, load_embeddings,
                           save_embeddings, split_dataset)
from medpatch.errors import ConfigError, DataFormatError


def small(**kw):
    base = dict(n_samples=200, seed=1)
    base.update(kw)
    return GeneratorConfig(**base)


class TestGenerator:
    def test_mortality_prevalence(self):
        ds = generate_dataset(GeneratorConfig(n_samples=20000, prevalence=0.125, seed=3, dim=2,
                                              token_range=(1, 2)))
        assert ds.labels().mean() == pytest.approx(0.125, abs=0.01)

    def test_condition_prevalence_within_three_sd(self):
        n = 5000
        ds = generate_dataset(GeneratorConfig(n_samples=n, n_classes=25, prevalence=CONDITION_PREVALENCE,
                                              dim=2, token_range=(1, 1), seed=4))
        rates = ds.labels().mean(axis=0)
        p = np.asarray(CONDITION_PREVALENCE)
        assert np.all(np.abs(rates - p) <= 3 * np.sqrt(p * (1 - p) / n))

    def test_no_missingness(self):
        ds = generate_dataset(small(missing=0.0))
        assert np.all(ds.availability() == 1)

    def test_anchor_never_missing(self):
        ds = generate_dataset(small(missing=0.9))
        assert np.all(ds.availability()[:, 0] == 1)
        assert ds.availability()[:, 1:].mean() < 0.3

    def test_availability_matches_tokens(self):
        ds = generate_dataset(small(missing=[0, 0.5, 0.5, 0.5]))
        for s in ds:
            for j, m in enumerate(ds.modalities):
                assert (s.a[j] == 1) == (s.modalities[m].tokens.shape[0] > 0) == s.present(m)

    def test_deterministic(self):
        a, b = generate_dataset(small(missing=0.3)), generate_dataset(small(missing=0.3))
        for s, t in zip(a, b):
            assert s.id == t.id and s.y.tobytes() == t.y.tobytes() and s.a.tobytes() == t.a.tobytes()
            for m in a.modalities:
                assert s.tokens(m).tobytes() == t.tokens(m).tobytes()

    def test_token_counts_in_range(self):
        ds = generate_dataset(small(token_range={"EHR": (3, 3), "CXR": (1, 5), "RR": (2, 4), "DN": (6, 9)}))
        for s in ds:
            assert s.tokens("EHR").shape == (3, 16)
            assert 1 <= s.tokens("CXR").shape[0] <= 5
            assert 6 <= s.tokens("DN").shape[0] <= 9

    def test_signal_is_predictive(self):
        # along the class direction, positives sit above negatives
        from medpatch.data import signal_directions
        cfg = small(n_samples=2000, signal=1.0, prevalence=0.5)
        ds = generate_dataset(cfg)
        u = signal_directions(cfg)["EHR"][0]
        proj = np.array([s.tokens("EHR").mean(axis=0) @ u for s in ds])
        y = ds.labels()[:, 0]
        assert proj[y == 1].mean() > proj[y == 0].mean() + 0.3

    @pytest.mark.parametrize("kw, field", [
        (dict(prevalence=1.0), "prevalence"),
        (dict(prevalence=[0.1, 0.2]), "prevalence"),
        (dict(signal=1.5), "signal"),
        (dict(missing=-0.1), "missing"),
        (dict(dim=0), "dim"),
        (dict(token_range=(0, 3)), "token_range"),
        (dict(anchor="XYZ"), "anchor"),
        (dict(n_classes=0), "n_classes"),
    ])
    def test_invalid_config_names_field(self, kw, field):
        with pytest.raises(ConfigError, match=field):
            GeneratorConfig(**kw)


class TestSplit:
    def ds(self, n):
        return generate_dataset(GeneratorConfig(n_samples=n, dim=1, token_range=(1, 1)))

    def test_hundred(self):
        sp = split_dataset(self.ds(100), seed=0)
        assert (len(sp.train), len(sp.validation), len(sp.test)) == (70, 10, 20)

    def test_hundred_and_one(self):
        # quotas 70.7 / 10.1 / 20.2: floors sum to 100, the leftover goes to the largest remainder (train)
        assert largest_remainder(101, (0.7, 0.1, 0.2)) == [71, 10, 20]
        sp = split_dataset(self.ds(101), seed=0)
        assert (len(sp.train), len(sp.validation), len(sp.test)) == (71, 10, 20)

    def test_same_seed(self):
        ds = self.ds(50)
        assert split_dataset(ds, seed=9) == split_dataset(ds, seed=9)
        assert split_dataset(ds, seed=9) != split_dataset(ds, seed=10)

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            split_dataset(self.ds(10), ratios=(0.5, 0.2, 0.2))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 1000), st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.integers(0, 2**31))
    def test_partition_property(self, n, raw, seed):
        ratios = np.asarray(raw) / np.sum(raw)
        ratios[2] = 1.0 - ratios[0] - ratios[1]
        if ratios[2] <= 0:
            return
        ids = [f"s{i}" for i in range(n)]
        ds = Dataset([Sample(i, {}, np.zeros(0), np.zeros(1)) for i in ids], (), 1)
        sp = split_dataset(ds, tuple(ratios), seed)
        parts = [sp.train, sp.validation, sp.test]
        assert sorted(sum(parts, [])) == sorted(ids)
        assert len(set(sp.train) | set(sp.validation) | set(sp.test)) == n
        for part, r in zip(parts, ratios):
            assert abs(len(part) - n * r) <= 1


class TestIngestion:
    def write(self, tmp_path, lines):
        p = tmp_path / "emb.jsonl"
        p.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")
        return p

    def test_missing_cxr(self, tmp_path):
        tok = {"tokens": [[0.1, 0.2]]}
        p = self.write(tmp_path, [
            {"id": "a", "label": [1], "modalities": {"EHR": tok, "CXR": tok, "RR": tok, "DN": tok}},
            {"id": "b", "label": [0], "modalities": {"EHR": tok, "RR": tok, "DN": tok}},
        ])
        ds = load_embeddings(p)
        assert ds.modalities == ("EHR", "CXR", "RR", "DN")
        np.testing.assert_array_equal(ds.availability(), [[1, 1, 1, 1], [1, 0, 1, 1]])
        assert not ds.samples[1].present("CXR")
        assert ds.samples[1].tokens("CXR").shape == (0, 2)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert len(load_embeddings(p)) == 0

    def test_round_trip_bit_identical(self, tmp_path):
        ds = generate_dataset(small(missing=[0, 0.4, 0.2, 0.3], n_classes=3, prevalence=[0.2, 0.5, 0.7]))
        p = tmp_path / "rt.jsonl"
        save_embeddings(ds, p)
        back = load_embeddings(p)
        assert back.modalities == ds.modalities and back.n_classes == 3
        for s, t in zip(ds, back):
            assert s.id == t.id
            assert s.a.tobytes() == t.a.tobytes() and s.y.tobytes() == t.y.tobytes()
            for m in ds.modalities:
                assert s.tokens(m).tobytes() == t.tokens(m).tobytes()

    @pytest.mark.parametrize("lines, pattern", [
        (['{"format": "other", "version": 1}'], "malformed header"),
        (['{"format": "medpatch-embeddings", "version": 9}'], "malformed header"),
        (["{not json"], "line 1"),
        ([{"id": "a", "label": [1], "modalities": {"EHR": {"tokens": [[1.0, 2.0], [3.0]]}}}], "inconsistent shape"),
        ([{"id": "a", "label": [1], "modalities": {"EHR": {"tokens": [[1.0, 2.0]]}}},
          {"id": "b", "label": [1], "modalities": {"EHR": {"tokens": [[1.0, 2.0, 3.0]]}}}], "line 2"),
        ([{"id": "a", "label": [1], "modalities": {}}, {"id": "a", "label": [0], "modalities": {}}], "duplicate"),
        ([{"id": "a", "label": [2], "modalities": {}}], "label"),
        ([{"id": "a", "modalities": {}}], "label"),
    ])
    def test_malformed(self, tmp_path, lines, pattern):
        with pytest.raises(DataFormatError, match=pattern):
            load_embeddings(self.write(tmp_path, lines))


class TestChunkPool:
    def test_identical_vectors(self):
        v = np.array([1.0, -2.0, 3.5])
        np.testing.assert_allclose(chunk_pool_document([v, v, v]), v)

    def test_two_equal_chunks(self):
        x = np.random.default_rng(0).normal(size=(1024, 4))
        means = [x[:512].mean(axis=0), x[512:].mean(axis=0)]
        np.testing.assert_allclose(chunk_pool_document(x), np.mean(means, axis=0), atol=1e-14)

    def test_uneven_chunks_equal_direct_mean(self):
        x = np.arange(600 * 3, dtype=float).reshape(600, 3) / 7.0
        direct = np.array([math.fsum(x[:, j]) / 600 for j in range(3)])
        np.testing.assert_allclose(chunk_pool_document(x), direct, rtol=1e-13)

    def test_empty(self):
        with pytest.raises(ValueError):
            chunk_pool_document(np.zeros((0, 3)))


def test_modality_tokens_invariants():
    with pytest.raises(DataFormatError):
        ModalityTokens("EHR", np.zeros((0, 3)), present=True)
    with pytest.raises(DataFormatError):
        ModalityTokens("EHR", np.zeros((2, 3)), present=False)
