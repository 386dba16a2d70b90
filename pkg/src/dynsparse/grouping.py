"""Voxel query grouping: share one critical-KV set across adjacent queries.

Queries are tiled into axis-aligned voxels of the 3D token grid. Each
voxel's proxy query (the member at floor(dim / 2) along every axis of the
voxel, which is the central cell for odd extents) selects the critical KV
set used by every member. Calibration walks a fixed ladder of voxel
shapes and keeps the largest one whose member/proxy overlap stays above
the required ratio.
"""

from dataclasses import dataclass

import numpy as np

from .attention import CriticalIndexSet, critical_kv_oracle, sparse_attention
from .flops import FlopCounter
from .grid import TokenGrid
from .selection import streaming_topk
from .validate import as_matrix, check_same_cols, check_unit_interval

# Candidate voxel shapes, smallest to largest member count.
SIZE_LADDER = (
    (1, 1, 1),
    (2, 2, 1),
    (2, 2, 2),
    (4, 2, 2),
    (4, 4, 2),
    (4, 4, 4),
    (8, 4, 4),
    (8, 8, 4),
    (8, 8, 8),
)


@dataclass
class VoxelGroupPlan:
    """A tiling partition of the grid plus one proxy index per group."""

    grid: TokenGrid
    dims: tuple
    members: list       # per group: sorted flat indices
    proxies: np.ndarray  # per group: flat index of the proxy, a member

    @property
    def n_groups(self) -> int:
        return len(self.members)

    def to_json(self) -> dict:
        return {
            "grid": list(self.grid.dims),
            "dims": list(self.dims),
            "proxies": self.proxies.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "VoxelGroupPlan":
        grid = TokenGrid(*data["grid"])
        plan = build_groups(grid, tuple(data["dims"]))
        if plan.proxies.tolist() != data["proxies"]:
            raise ValueError("stored proxies do not match the deterministic tiling")
        return plan


def build_groups(grid: TokenGrid, dims) -> VoxelGroupPlan:
    """Tile the grid into voxels of shape dims (clipped at boundaries)."""
    gt, gh, gw = (int(d) for d in dims)
    if min(gt, gh, gw) < 1:
        raise ValueError(f"voxel dims must be positive, got {dims}")
    if gt > grid.frames or gh > grid.height or gw > grid.width:
        raise ValueError(f"voxel dims {dims} exceed grid {grid.dims}")

    members = []
    proxies = []
    for t0 in range(0, grid.frames, gt):
        for h0 in range(0, grid.height, gh):
            for w0 in range(0, grid.width, gw):
                ts = np.arange(t0, min(t0 + gt, grid.frames))
                hs = np.arange(h0, min(h0 + gh, grid.height))
                ws = np.arange(w0, min(w0 + gw, grid.width))
                tt, hh, ww = np.meshgrid(ts, hs, ws, indexing="ij")
                flat = (tt * grid.height + hh) * grid.width + ww
                members.append(np.sort(flat.ravel()))
                proxy = grid.flat_index(
                    ts[len(ts) // 2], hs[len(hs) // 2], ws[len(ws) // 2]
                )
                proxies.append(proxy)
    return VoxelGroupPlan(
        grid=grid, dims=(gt, gh, gw), members=members,
        proxies=np.array(proxies, dtype=np.int64),
    )


def overlap_ratio(member_sets: list, proxy_pos: int) -> float:
    """Mean over non-proxy members of |I_member ∩ I_proxy| / |I_member|.

    ``member_sets`` holds one sorted index array per group member and
    ``proxy_pos`` locates the proxy within that list. A singleton group is
    defined as 1.0.
    """
    if not 0 <= proxy_pos < len(member_sets):
        raise ValueError("proxy position outside the member list")
    if len(member_sets) == 1:
        return 1.0
    proxy_set = np.asarray(member_sets[proxy_pos], dtype=np.int64)
    ratios = []
    for pos, member in enumerate(member_sets):
        if pos == proxy_pos:
            continue
        member = np.asarray(member, dtype=np.int64)
        if member.size == 0:
            raise ValueError("member sets must be nonempty")
        inter = np.intersect1d(member, proxy_set, assume_unique=True)
        ratios.append(inter.size / member.size)
    return float(np.mean(ratios))


def _member_sets(q, k, members, theta, k_top):
    """Critical sets for one group's member queries (theta- or k-based)."""
    if k_top is not None:
        rows = streaming_topk(q[members], k, k_top).indices
        return [rows[i] for i in range(len(members))]
    logits = q[members] @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    scores = np.exp(logits)
    scores /= scores.sum(axis=1, keepdims=True)
    return critical_kv_oracle(scores, theta).indices


def calibrate_group_size(
    qs,
    ks,
    grid: TokenGrid,
    theta: float = 0.9,
    target_ratio: float = 0.8,
    *,
    k_top: int | None = None,
    n_sample_groups: int = 32,
    seed: int = 0,
    ladder=SIZE_LADDER,
) -> tuple:
    """Largest ladder voxel whose sampled mean overlap meets target_ratio.

    ``qs``/``ks`` are per-head (S, d_k) tensors; ratios are averaged over
    sampled groups and heads. Falls back to 1x1x1, which always passes.
    """
    target_ratio = check_unit_interval("target_ratio", target_ratio, open_low=True)
    if isinstance(qs, np.ndarray) and qs.ndim == 2:
        qs, ks = [qs], [ks]
    heads = [(as_matrix("Q", q), as_matrix("K", k)) for q, k in zip(qs, ks)]
    for q, k in heads:
        check_same_cols("Q", q, "K", k)
        if q.shape[0] != grid.size:
            raise ValueError("Q rows must match the grid token count")

    best = (1, 1, 1)
    best_count = 1
    rng = np.random.default_rng(seed)
    for dims in ladder:
        if dims == (1, 1, 1):
            continue
        if dims[0] > grid.frames or dims[1] > grid.height or dims[2] > grid.width:
            continue
        plan = build_groups(grid, dims)
        eligible = [g for g in range(plan.n_groups) if plan.members[g].size > 1]
        if not eligible:
            continue
        chosen = rng.choice(
            len(eligible), size=min(n_sample_groups, len(eligible)), replace=False
        )
        ratios = []
        for gi in np.asarray(chosen):
            g = eligible[gi]
            members = plan.members[g]
            proxy_pos = int(np.searchsorted(members, plan.proxies[g]))
            for q, k in heads:
                sets = _member_sets(q, k, members, theta, k_top)
                ratios.append(overlap_ratio(sets, proxy_pos))
        count = int(np.prod(dims))
        if np.mean(ratios) >= target_ratio and count > best_count:
            best, best_count = dims, count
    return best


def select_group_critical(q, k, plan: VoxelGroupPlan, theta: float) -> list:
    """Per-group critical sets selected by each group's proxy query."""
    q = as_matrix("Q", q)
    k = as_matrix("K", k)
    check_same_cols("Q", q, "K", k)
    logits = q[plan.proxies] @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    scores = np.exp(logits)
    scores /= scores.sum(axis=1, keepdims=True)
    return critical_kv_oracle(scores, theta).indices


def grouped_sparse_attention(
    q,
    k,
    v,
    plan: VoxelGroupPlan,
    group_sets: list,
    *,
    flops: FlopCounter | None = None,
) -> np.ndarray:
    """Sparse attention where each group's members share one index set."""
    if len(group_sets) != plan.n_groups:
        raise ValueError(f"need {plan.n_groups} group index sets, got {len(group_sets)}")
    q = as_matrix("Q", q)
    per_query = [None] * q.shape[0]
    for g, members in enumerate(plan.members):
        shared = np.asarray(group_sets[g], dtype=np.int64)
        if shared.size == 0:
            raise ValueError(f"group {g} has an empty index set")
        for m in members:
            per_query[m] = shared
    return sparse_attention(q, k, v, CriticalIndexSet(per_query), flops=flops)
