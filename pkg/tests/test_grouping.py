import numpy as np
import pytest

from dynsparse.attention import (
    attention_scores,
    critical_kv_oracle,
    full_attention,
    sparse_attention,
)
from dynsparse.grid import TokenGrid
from dynsparse.grouping import (
    VoxelGroupPlan,
    build_groups,
    calibrate_group_size,
    grouped_sparse_attention,
    overlap_ratio,
    select_group_critical,
)
from dynsparse.synthetic import smooth_qk


class TestBuildGroups:
    def test_regular_tiling(self):
        plan = build_groups(TokenGrid(4, 4, 4), (2, 2, 2))
        assert plan.n_groups == 8
        assert all(m.size == 8 for m in plan.members)

    def test_singletons(self):
        grid = TokenGrid(2, 3, 2)
        plan = build_groups(grid, (1, 1, 1))
        assert plan.n_groups == grid.size
        np.testing.assert_array_equal(plan.proxies, np.arange(grid.size))

    def test_boundary_voxels(self):
        # 5 frames tiled by 2 -> last frame slab has half-size groups
        plan = build_groups(TokenGrid(5, 4, 4), (2, 2, 2))
        assert plan.n_groups == 3 * 2 * 2
        sizes = sorted(m.size for m in plan.members)
        assert sizes == [4] * 4 + [8] * 8

    def test_partition_property(self):
        grid = TokenGrid(5, 6, 7)
        plan = build_groups(grid, (2, 3, 4))
        seen = np.concatenate(plan.members)
        assert seen.size == grid.size
        np.testing.assert_array_equal(np.sort(seen), np.arange(grid.size))

    def test_proxy_is_member_at_floor_mid(self):
        grid = TokenGrid(4, 4, 4)
        plan = build_groups(grid, (2, 2, 2))
        for g, members in enumerate(plan.members):
            assert plan.proxies[g] in members
        # first voxel spans (0..1)^3; floor(2/2)=1 per axis -> (1,1,1)
        assert plan.proxies[0] == grid.flat_index(1, 1, 1)
        # odd-sized voxel takes the true centre
        plan3 = build_groups(TokenGrid(3, 3, 3), (3, 3, 3))
        assert plan3.proxies[0] == TokenGrid(3, 3, 3).flat_index(1, 1, 1)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            build_groups(TokenGrid(4, 4, 4), (0, 2, 2))
        with pytest.raises(ValueError):
            build_groups(TokenGrid(4, 4, 4), (8, 2, 2))

    def test_json_roundtrip(self):
        plan = build_groups(TokenGrid(4, 4, 2), (2, 2, 2))
        restored = VoxelGroupPlan.from_json(plan.to_json())
        assert restored.dims == plan.dims
        for a, b in zip(restored.members, plan.members):
            np.testing.assert_array_equal(a, b)


class TestOverlapRatio:
    def test_identical_sets(self):
        sets = [np.array([1, 2, 3])] * 4
        assert overlap_ratio(sets, 0) == 1.0

    def test_disjoint_sets(self):
        sets = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5])]
        assert overlap_ratio(sets, 0) == 0.0

    def test_singleton_group(self):
        assert overlap_ratio([np.array([3, 4])], 0) == 1.0

    def test_matches_brute_force(self, rng):
        sets = [np.sort(rng.choice(64, 8, replace=False)) for _ in range(6)]
        proxy = 2
        got = overlap_ratio(sets, proxy)
        manual = np.mean([
            len(set(sets[i]) & set(sets[proxy])) / len(sets[i])
            for i in range(6) if i != proxy
        ])
        assert got == pytest.approx(manual)


class TestCalibration:
    def test_identical_rows_pick_largest(self):
        grid = TokenGrid(8, 8, 8)
        q = np.tile(np.array([1.0, -0.5, 0.25, 2.0]), (grid.size, 1))
        k = np.tile(np.array([0.5, 1.0, -1.0, 0.5]), (grid.size, 1))
        dims = calibrate_group_size([q], [k], grid, theta=0.9, target_ratio=0.8)
        assert dims == (8, 8, 8)

    def test_iid_random_small_k_falls_back(self):
        grid = TokenGrid(8, 8, 8)
        rng = np.random.default_rng(3)
        q = rng.standard_normal((grid.size, 16))
        k = rng.standard_normal((grid.size, 16))
        dims = calibrate_group_size([q], [k], grid, theta=0.9, target_ratio=0.8,
                                    k_top=8, seed=0)
        assert dims == (1, 1, 1)

    def test_smooth_fields_allow_grouping(self):
        grid = TokenGrid(8, 8, 8)
        rng = np.random.default_rng(11)
        q, k = smooth_qk(grid, 16, rng)
        dims = calibrate_group_size([q], [k], grid, theta=0.9, target_ratio=0.8,
                                    seed=0)
        assert int(np.prod(dims)) >= 8  # at least 2x2x2 members


class TestGroupedSparseAttention:
    def test_singleton_plan_equals_per_query(self, rng):
        grid = TokenGrid(2, 4, 4)
        s = grid.size
        q = rng.standard_normal((s, 6))
        k = rng.standard_normal((s, 6))
        v = rng.standard_normal((s, 6))
        plan = build_groups(grid, (1, 1, 1))
        oracle = critical_kv_oracle(attention_scores(q, k), 0.9)
        # one group per query: group sets are exactly the per-query sets
        out = grouped_sparse_attention(q, k, v, plan,
                                       [oracle.indices[p] for p in plan.proxies])
        np.testing.assert_array_equal(out, sparse_attention(q, k, v, oracle))

    def test_all_indices_equals_full(self, rng):
        grid = TokenGrid(2, 2, 4)
        s = grid.size
        q = rng.standard_normal((s, 4))
        k = rng.standard_normal((s, 4))
        v = rng.standard_normal((s, 4))
        plan = build_groups(grid, (2, 2, 2))
        sets = [np.arange(s)] * plan.n_groups
        np.testing.assert_allclose(grouped_sparse_attention(q, k, v, plan, sets),
                                   full_attention(q, k, v), atol=1e-6)

    def test_empty_group_set_rejected(self, rng):
        grid = TokenGrid(2, 2, 2)
        q = rng.standard_normal((8, 3))
        plan = build_groups(grid, (2, 2, 2))
        with pytest.raises(ValueError):
            grouped_sparse_attention(q, q, q, plan, [np.array([], dtype=np.int64)])

    def test_smooth_grouped_error_within_twice_ungrouped(self):
        grid = TokenGrid(8, 8, 8)
        rng = np.random.default_rng(17)
        q, k = smooth_qk(grid, 16, rng)
        v = rng.standard_normal((grid.size, 16))
        theta = 0.9
        full = full_attention(q, k, v)
        scores = attention_scores(q, k)
        oracle = critical_kv_oracle(scores, theta)
        ungrouped = sparse_attention(q, k, v, oracle)
        plan = build_groups(grid, (2, 2, 2))
        group_sets = select_group_critical(q, k, plan, theta)
        grouped = grouped_sparse_attention(q, k, v, plan, group_sets)
        err_ungrouped = np.linalg.norm(ungrouped - full)
        err_grouped = np.linalg.norm(grouped - full)
        assert err_grouped <= 2.0 * err_ungrouped
