import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsparse.selection import (
    AllocationMeter,
    k_from_sparsity,
    streaming_topk,
    twopass_select,
)

from oracles import naive_topk


class TestKFromSparsity:
    def test_examples(self):
        assert k_from_sparsity(0.9, 1000) == 100
        assert k_from_sparsity(0.0, 7) == 7
        assert k_from_sparsity(0.999, 100) == 1

    def test_rejects_full_sparsity(self):
        with pytest.raises(ValueError):
            k_from_sparsity(1.0, 100)

    @given(st.floats(0.0, 0.999), st.integers(1, 10_000))
    def test_bounds(self, sparsity, s):
        k = k_from_sparsity(sparsity, s)
        assert 1 <= k <= s


class TestStreamingTopk:
    def test_k1_is_argmax(self, rng):
        q = rng.standard_normal((20, 4))
        k = rng.standard_normal((50, 4))
        result = streaming_topk(q, k, 1)
        scores = q @ k.T
        np.testing.assert_array_equal(result.indices[:, 0], scores.argmax(axis=1))

    def test_k_equals_s(self, rng):
        q = rng.standard_normal((5, 3))
        k = rng.standard_normal((9, 3))
        result = streaming_topk(q, k, 9)
        for row in result.indices:
            np.testing.assert_array_equal(row, np.arange(9))

    def test_k_too_large_rejected(self, rng):
        with pytest.raises(ValueError):
            streaming_topk(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), 5)

    def test_matches_naive_oracle_batch(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            s_q = int(rng.integers(1, 64))
            s_k = int(rng.integers(2, 96))
            d = int(rng.integers(1, 8))
            k = int(rng.integers(1, min(s_k, 24) + 1))
            q_lr = rng.standard_normal((s_q, d))
            k_lr = rng.standard_normal((s_k, d))
            expect_idx, expect_thr = naive_topk(q_lr, k_lr, k)
            got = streaming_topk(q_lr, k_lr, k)
            np.testing.assert_array_equal(got.indices, expect_idx)
            np.testing.assert_allclose(got.thresholds, expect_thr, rtol=1e-12)

    def test_ties_prefer_lower_index(self):
        # identical key rows -> identical scores; ties resolve left
        q = np.ones((3, 2))
        k = np.ones((10, 2))
        result = streaming_topk(q, k, 4, tile=3)
        for row in result.indices:
            np.testing.assert_array_equal(row, [0, 1, 2, 3])

    def test_tile_width_has_no_semantic_effect(self, rng):
        q = rng.standard_normal((40, 5))
        k = rng.standard_normal((70, 5))
        baseline = streaming_topk(q, k, 9, tile=128)
        for tile in (1, 3, 17, 64, 1024):
            other = streaming_topk(q, k, 9, tile=tile)
            np.testing.assert_array_equal(other.indices, baseline.indices)
            # thresholds may differ in the last ulp across GEMM shapes
            np.testing.assert_allclose(other.thresholds, baseline.thresholds,
                                       rtol=1e-12)

    def test_determinism(self, rng):
        q = rng.standard_normal((33, 4))
        k = rng.standard_normal((65, 4))
        a = streaming_topk(q, k, 7)
        b = streaming_topk(q, k, 7)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_partition_independence(self, rng):
        # processing query subsets separately must agree with one shot
        q = rng.standard_normal((48, 4))
        k = rng.standard_normal((64, 4))
        whole = streaming_topk(q, k, 6)
        parts = [streaming_topk(q[i:i + 16], k, 6) for i in range(0, 48, 16)]
        stitched = np.concatenate([p.indices for p in parts])
        np.testing.assert_array_equal(whole.indices, stitched)

    def test_allocation_meter_bound(self, rng):
        s, k = 1024, 32
        q = rng.standard_normal((s, 8))
        kk = rng.standard_normal((s, 8))
        meter = AllocationMeter()
        streaming_topk(q, kk, k, meter=meter)
        assert meter.peak <= 8 * s * k
        assert meter.current == 0  # everything released


class TestTwopassSelect:
    def test_all_equal_scores_tie_rule(self):
        q = np.ones((4, 3))
        k = np.ones((12, 3))
        result = twopass_select(q, k, 3)
        for row in result.indices:
            np.testing.assert_array_equal(row, [0, 1, 2])

    def test_equals_streaming_on_distinct_scores(self, rng):
        q = rng.standard_normal((30, 6))
        k = rng.standard_normal((55, 6))
        a = streaming_topk(q, k, 11)
        b = twopass_select(q, k, 11)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_allclose(a.thresholds, b.thresholds, rtol=1e-15)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal((128, 5))
        k = rng.standard_normal((128, 5))
        expect_idx, _ = naive_topk(q, k, 13)
        got = twopass_select(q, k, 13)
        np.testing.assert_array_equal(got.indices, expect_idx)

    def test_duplicate_threshold_scores(self):
        # many keys tie exactly at the threshold value
        q = np.array([[1.0, 0.0]])
        k = np.array([[2.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
        result = twopass_select(q, k, 3)
        np.testing.assert_array_equal(result.indices[0], [0, 1, 2])

    def test_to_index_set_roundtrip(self, rng):
        q = rng.standard_normal((6, 3))
        k = rng.standard_normal((9, 3))
        result = streaming_topk(q, k, 4)
        idx = result.to_index_set()
        assert idx.uniform_k() == 4
        np.testing.assert_array_equal(idx.as_array(), result.indices)
