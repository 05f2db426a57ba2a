import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medpatch import numeric as nm
from medpatch.confidence import ConfidenceHead, TemperatureParams, binary_entropy
from medpatch.errors import ConfigError
from medpatch.numeric import ParameterStore
from medpatch.patching import (assemble_joint, entropy_partition, entropy_threshold, joint_predict,
                               partition_tokens, patch_features, pool_mean, project, sample_pools)

MODS = ("EHR", "CXR", "RR", "DN")


class TestPartition:
    def test_example(self):
        hi, lo = partition_tokens([0.9, 0.6, 0.75, 0.5], 0.75)
        np.testing.assert_array_equal(hi, [0, 2])
        np.testing.assert_array_equal(lo, [1, 3])

    def test_theta_one(self):
        hi, lo = partition_tokens([1.0, 0.999], 1.0)
        np.testing.assert_array_equal(hi, [0])

    @pytest.mark.parametrize("theta", [0.5, 0.3, 1.01])
    def test_bad_theta(self, theta):
        with pytest.raises(ConfigError):
            partition_tokens([0.7], theta)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0.5, 1.0), max_size=60), st.floats(0.5, 1.0, exclude_min=True))
    def test_disjoint_cover(self, gamma, theta):
        hi, lo = partition_tokens(gamma, theta)
        assert set(hi).isdisjoint(lo)
        assert sorted(np.concatenate([hi, lo]).tolist()) == list(range(len(gamma)))
        assert all(gamma[i] >= theta for i in hi) and all(gamma[i] < theta for i in lo)

    def test_entropy_threshold_value(self):
        assert entropy_threshold(0.75) == pytest.approx(0.8112781244591329, abs=1e-12)

    def test_entropy_matches_confidence(self, rng):
        th = entropy_threshold(0.75)
        for _ in range(1000):
            gamma = rng.uniform(0.5, 1.0, int(rng.integers(1, 40)))
            hi_c, lo_c = partition_tokens(gamma, 0.75)
            hi_e, lo_e = entropy_partition(binary_entropy(gamma), th)
            np.testing.assert_array_equal(hi_c, hi_e)
            np.testing.assert_array_equal(lo_c, lo_e)

    def test_entropy_boundary_token(self):
        hi, _ = entropy_partition(binary_entropy(np.array([0.75])), entropy_threshold(0.75))
        assert hi.tolist() == [0]


class TestPooling:
    def test_mean(self):
        z = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]])
        np.testing.assert_array_equal(pool_mean(z, [0, 2]), [3.0, 5.5])

    def test_empty_pool_is_zero(self):
        np.testing.assert_array_equal(pool_mean(np.ones((3, 4)), []), np.zeros(4))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            pool_mean(np.ones((3, 2)), [3])

    def test_project(self):
        np.testing.assert_array_equal(project(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [1.0, 1.0]])), [1.0, 3.0])
        np.testing.assert_array_equal(project(np.zeros(2), np.ones((3, 2))), np.zeros(3))

    def test_project_width(self):
        with pytest.raises(ValueError):
            project(np.ones(3), np.ones((2, 2)))


class TestJoint:
    def projected(self, rng, c=2, d=3):
        return {m: (rng.normal(size=(c, d)), rng.normal(size=(c, d))) for m in MODS}

    def test_all_patterns_zero_slots(self, rng):
        proj = self.projected(rng)
        for a in itertools.product((0, 1), repeat=4):
            rep = assemble_joint(proj, a, MODS)
            assert rep.high.shape == (2, 12)
            for j, m in enumerate(MODS):
                sl = slice(3 * j, 3 * j + 3)
                if a[j]:
                    np.testing.assert_array_equal(rep.high[:, sl], proj[m][0])
                    np.testing.assert_array_equal(rep.low[:, sl], proj[m][1])
                else:
                    assert np.all(rep.high[:, sl] == 0.0) and np.all(rep.low[:, sl] == 0.0)

    def test_inconsistent_shapes(self, rng):
        proj = self.projected(rng)
        proj["DN"] = (np.zeros((2, 4)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            assemble_joint(proj, [1, 1, 1, 1], MODS)

    def test_predict_shared_and_per_class(self, rng):
        rep = assemble_joint(self.projected(rng), [1, 0, 1, 1], MODS)
        w = rng.normal(size=12)
        hi, lo = joint_predict(rep, w, 0.1, w, -0.1)
        np.testing.assert_allclose(hi, nm.sigmoid(rep.high @ w + 0.1))
        hi_pc, _ = joint_predict(rep, np.stack([w, w]), np.array([0.1, 0.1]), np.stack([w, w]), 0.0)
        np.testing.assert_allclose(hi_pc, hi)
        assert np.all((hi > 0) & (hi < 1) & (lo > 0) & (lo < 1))

    def test_predict_width(self, rng):
        rep = assemble_joint(self.projected(rng), [1, 1, 1, 1], MODS)
        with pytest.raises(ValueError):
            joint_predict(rep, np.ones(5), 0.0, np.ones(12), 0.0)


class TestSamplePools:
    def test_all_high_leaves_low_empty(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        high, low = sample_pools(z, np.array([[5.0], [-5.0]]), np.array([1.0]))
        np.testing.assert_allclose(high[0], [0.5, 0.5])
        np.testing.assert_array_equal(low[0], [0.0, 0.0])

    def test_temperature_moves_tokens_to_low(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        # gamma = sigma(2 / tau): tau = 1 gives 0.88, tau = 4 gives 0.62
        high, low = sample_pools(z, np.array([[2.0], [0.1]]), np.array([4.0]))
        np.testing.assert_array_equal(high[0], [0.0, 0.0])
        np.testing.assert_allclose(low[0], [0.5, 0.5])

    def test_entropy_mode_agrees(self, rng):
        z = rng.normal(size=(20, 3))
        logits = rng.normal(0, 2, (20, 2))
        tau = np.array([1.0, 1.7])
        for a, b in zip(sample_pools(z, logits, tau), sample_pools(z, logits, tau, mode="entropy")):
            np.testing.assert_array_equal(a, b)

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            sample_pools(np.ones((1, 1)), np.ones((1, 1)), np.ones(1), mode="median")

    def test_patch_features_missing_are_zero(self, tiny):
        rng = np.random.default_rng(1)
        heads = {m: ConfidenceHead(m, ParameterStore.from_tensors({"W": rng.normal(size=(2, 5)),
                                                                   "b": np.zeros(2)})) for m in MODS}
        temps = TemperatureParams.ones(MODS, 2)
        high, low = patch_features(tiny["test"], MODS, tiny["stubs"], heads, temps, 2)
        a = tiny["test"].availability()
        for j, m in enumerate(MODS):
            assert high[m].shape == (len(tiny["test"]), 2, 5)
            assert np.all(high[m][a[:, j] == 0] == 0) and np.all(low[m][a[:, j] == 0] == 0)
