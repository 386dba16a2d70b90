import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsparse.attention import attention_scores, critical_kv_oracle, head_sparsity
from dynsparse.profiler import (
    SampleConfig,
    SparsityProfile,
    ema_update,
    measure_block_sparsity,
    sample_queries,
)


class TestSampleQueries:
    def test_exact_division(self):
        cfg = SampleConfig(factor=16, seed=0)
        assert sample_queries(16, cfg).size == 1
        assert sample_queries(256, cfg).size == 16

    def test_factor_one_returns_all(self):
        cfg = SampleConfig(factor=1, seed=0)
        np.testing.assert_array_equal(sample_queries(10, cfg), np.arange(10))

    def test_deterministic_per_seed(self):
        cfg = SampleConfig(factor=16, seed=5)
        a = sample_queries(256, cfg)
        b = sample_queries(256, cfg)
        np.testing.assert_array_equal(a, b)
        c = sample_queries(256, cfg, seed=6)
        assert not np.array_equal(a, c)

    def test_distinct_and_sorted(self):
        cfg = SampleConfig(factor=4, seed=1)
        idx = sample_queries(64, cfg)
        assert idx.size == 16
        assert np.all(np.diff(idx) > 0)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            sample_queries(0, SampleConfig())
        with pytest.raises(ValueError):
            sample_queries(8, SampleConfig(factor=16))

    def test_uniformity_chi_square(self):
        # frequency of each index over many seeds should be uniform
        from scipy import stats

        s, n_seeds = 64, 2000
        cfg = SampleConfig(factor=4)
        counts = np.zeros(s)
        for seed in range(n_seeds):
            counts[sample_queries(s, cfg, seed=seed)] += 1
        expected = counts.sum() / s
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        cutoff = stats.chi2.ppf(0.999, df=s - 1)
        assert chi2 < cutoff


class TestMeasureBlockSparsity:
    def test_onehot_rows(self):
        # concentrated keys: a single key dwarfs the rest
        s = 100
        rng = np.random.default_rng(0)
        q = np.zeros((s, 4))
        q[:, 0] = 50.0
        k = rng.standard_normal((s, 4)) * 0.01
        k[7, 0] = 10.0  # one dominant key
        cfg = SampleConfig(factor=1)
        values = measure_block_sparsity([q], [k], 0.9, cfg)
        assert values[0] == pytest.approx(0.99)

    def test_uniform_scores_closed_form(self):
        s = 100
        q = np.zeros((s, 3))
        k = np.zeros((s, 3))
        cfg = SampleConfig(factor=1)
        values = measure_block_sparsity([q], [k], 0.9, cfg)
        assert values[0] == pytest.approx(1 - np.ceil(0.9 * s) / s)

    def test_factor_one_equals_full_oracle(self, rng):
        s = 128
        q = rng.standard_normal((s, 8))
        k = rng.standard_normal((s, 8))
        cfg = SampleConfig(factor=1)
        measured = measure_block_sparsity([q], [k], 0.9, cfg)[0]
        oracle = head_sparsity(critical_kv_oracle(attention_scores(q, k), 0.9), s)
        assert measured == pytest.approx(oracle, abs=1e-12)

    def test_sampling_error_study(self):
        # factor-16 sampling vs full measurement at S=1024, 100 seeds
        rng = np.random.default_rng(42)
        s = 1024
        q = 2.0 * rng.standard_normal((s, 16))
        k = 2.0 * rng.standard_normal((s, 16))
        full = measure_block_sparsity([q], [k], 0.9, SampleConfig(factor=1))[0]
        cfg = SampleConfig(factor=16)
        diffs = np.array([
            abs(measure_block_sparsity([q], [k], 0.9, cfg, seed=seed)[0] - full)
            for seed in range(100)
        ])
        assert diffs.max() <= 0.1
        assert np.median(diffs) <= 0.03


class TestEmaUpdate:
    def test_example(self):
        assert ema_update(0.8, 0.9, 0.1) == pytest.approx(0.81)

    def test_alpha_one_returns_sample(self):
        assert ema_update(0.3, 0.7, 1.0) == 0.7

    def test_geometric_convergence(self):
        prev, sample, alpha = 0.2, 0.9, 0.25
        value = prev
        for n in range(1, 20):
            value = ema_update(value, sample, alpha)
            assert abs(value - sample) == pytest.approx(
                (1 - alpha) ** n * abs(prev - sample), rel=1e-9
            )

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1))
    def test_convex_hull(self, prev, sample, alpha):
        out = ema_update(prev, sample, alpha)
        assert min(prev, sample) - 1e-12 <= out <= max(prev, sample) + 1e-12

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ema_update(1.2, 0.5, 0.1)
        with pytest.raises(ValueError):
            ema_update(0.5, 0.5, 0.0)


class TestSparsityProfile:
    def test_update_and_means(self):
        profile = SparsityProfile(alpha=0.5)
        profile.update_block(0, [0.8, 0.6], iteration=1)
        profile.update_block(0, [0.9, 0.7], iteration=2)
        # first update seeds the EMA with the sample itself
        assert profile.ema(0, 0) == pytest.approx(0.85)
        assert profile.ema(0, 1) == pytest.approx(0.65)
        assert profile.block_mean(0) == pytest.approx(0.75)

    def test_snapshot_roundtrip(self):
        profile = SparsityProfile(alpha=0.2)
        profile.update_block(0, [0.5, 0.6], iteration=3)
        profile.update_block(2, [0.9], iteration=3)
        snap = profile.snapshot()
        restored = SparsityProfile.from_snapshot(snap)
        assert restored.ema(0, 1) == profile.ema(0, 1)
        assert restored.blocks() == [0, 2]
        assert snap["blocks"]["2"]["0"]["iteration"] == 3
