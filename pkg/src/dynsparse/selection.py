"""Streaming top-k selection over low-rank score products.

Both selectors produce the exact top-k index set per query (ties resolve
toward the lower index) without ever materialising the S x S product:
``streaming_topk`` merges column tiles into a bounded per-query buffer,
``twopass_select`` first finds each query's k-th score and then re-scans
for indices at or above it. Tile and query-block widths are performance
knobs with no effect on the result.

Auxiliary allocations are reported through an AllocationMeter so tests can
assert the O(S*k) working-set bound.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import CriticalIndexSet
from .flops import FlopCounter
from .validate import as_matrix, check_same_cols, check_unit_interval

DEFAULT_TILE = 128


def _query_block(s_q: int) -> int:
    # larger blocks amortise merge overhead at big S; bounded so auxiliary
    # workspace stays well inside the O(S*k) budget
    return int(min(256, max(64, s_q // 16)))


@dataclass
class AllocationMeter:
    """Counts live auxiliary array entries; ``peak`` is the test hook."""

    current: int = 0
    peak: int = 0
    events: list = field(default_factory=list)

    def grab(self, n_entries: int, label: str = "") -> None:
        self.current += int(n_entries)
        self.peak = max(self.peak, self.current)
        self.events.append((label, int(n_entries)))

    def release(self, n_entries: int) -> None:
        self.current -= int(n_entries)


@dataclass
class TopKResult:
    """Exact per-query top-k: (S, k) ascending-sorted indices + k-th scores."""

    indices: np.ndarray
    thresholds: np.ndarray
    k: int

    def to_index_set(self) -> CriticalIndexSet:
        return CriticalIndexSet(list(self.indices), theta=None)


def k_from_sparsity(sparsity: float, s_total: int) -> int:
    """Selection size for a target sparsity: max(1, ceil((1 - sparsity) * S))."""
    sparsity = float(sparsity)
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    if s_total < 1:
        raise ValueError("s_total must be positive")
    return max(1, int(np.ceil((1.0 - sparsity) * s_total)))


def _prep(q_lr, k_lr, k):
    q_lr = as_matrix("Q_lr", q_lr)
    k_lr = as_matrix("K_lr", k_lr)
    check_same_cols("Q_lr", q_lr, "K_lr", k_lr)
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > k_lr.shape[0]:
        raise ValueError(f"k={k} exceeds the {k_lr.shape[0]} available keys")
    return q_lr, k_lr, k


def _merge_block(best_s, best_i, tile_s, tile_i, k):
    """Keep the k best of (current best, new tile) per row.

    Selection by value via an O(n) partition: everything above the k-th
    largest value v* is kept, and rows with more than the needed number of
    entries exactly at v* are repaired by keeping the lowest original
    indices (the global tie rule). Buffer order is unspecified; callers
    sort on emit.
    """
    cat_s = np.concatenate([best_s, tile_s], axis=1)
    cat_i = np.concatenate([best_i, tile_i], axis=1)
    n_rows, n = cat_s.shape
    vstar = np.partition(cat_s, n - k, axis=1)[:, n - k]
    gt = cat_s > vstar[:, None]
    eq = cat_s == vstar[:, None]
    need = k - gt.sum(axis=1)
    easy = eq.sum(axis=1) == need

    out_s = np.empty((n_rows, k), dtype=cat_s.dtype)
    out_i = np.empty((n_rows, k), dtype=cat_i.dtype)
    if np.any(easy):
        keep = gt[easy] | eq[easy]
        cols = np.nonzero(keep)[1].reshape(-1, k)
        rows = np.arange(n_rows)[easy, None]
        out_s[easy] = cat_s[rows, cols]
        out_i[easy] = cat_i[rows, cols]
    for row in np.nonzero(~easy)[0]:
        hi = np.nonzero(gt[row])[0]
        tied = np.nonzero(eq[row])[0]
        tied = tied[np.argsort(cat_i[row, tied], kind="stable")][: need[row]]
        cols = np.concatenate([hi, tied])
        out_s[row] = cat_s[row, cols]
        out_i[row] = cat_i[row, cols]
    return out_s, out_i, cat_s.size, cat_i.size


def streaming_topk(
    q_lr,
    k_lr,
    k: int,
    *,
    tile: int = DEFAULT_TILE,
    meter: AllocationMeter | None = None,
    flops: FlopCounter | None = None,
) -> TopKResult:
    """Tile-streamed exact top-k of Q_lr K_lr^T.

    Keys are consumed in column tiles; each tile's partial product is
    merged into a per-query buffer of k (score, index) pairs, so peak
    auxiliary memory is O(S*k + block*tile) entries.
    """
    q_lr, k_lr, k = _prep(q_lr, k_lr, k)
    s_q, s_k = q_lr.shape[0], k_lr.shape[0]
    tile = max(1, int(tile))
    meter = meter if meter is not None else AllocationMeter()

    score_dtype = (q_lr[:1] @ k_lr[:1].T).dtype
    best_scores = np.full((s_q, k), -np.inf, dtype=score_dtype)
    best_idx = np.full((s_q, k), -1, dtype=np.int64)
    meter.grab(2 * s_q * k, "result buffers")

    q_step = _query_block(s_q)
    for q0 in range(0, s_q, q_step):
        q1 = min(q0 + q_step, s_q)
        q_block = q_lr[q0:q1]
        for c0 in range(0, s_k, tile):
            c1 = min(c0 + tile, s_k)
            tile_scores = q_block @ k_lr[c0:c1].T
            tile_idx = np.broadcast_to(
                np.arange(c0, c1, dtype=np.int64), tile_scores.shape
            )
            meter.grab(tile_scores.size, "tile product")
            merged_s, merged_i, tmp_s, tmp_i = _merge_block(
                best_scores[q0:q1], best_idx[q0:q1], tile_scores, tile_idx, k
            )
            meter.grab(tmp_s + tmp_i, "merge workspace")
            best_scores[q0:q1] = merged_s
            best_idx[q0:q1] = merged_i
            meter.release(tmp_s + tmp_i)
            meter.release(tile_scores.size)
            if flops is not None:
                flops.estimation += tile_scores.size * 2 * q_lr.shape[1]
                flops.selection += tile_scores.size

    # buffers are unordered; emit ascending indices, threshold = weakest kept
    order = np.argsort(best_idx, axis=1)
    rows = np.arange(s_q)[:, None]
    result = TopKResult(
        indices=best_idx[rows, order],
        thresholds=best_scores.min(axis=1).astype(np.float64),
        k=k,
    )
    meter.release(2 * s_q * k)
    return result


def twopass_select(
    q_lr,
    k_lr,
    k: int,
    *,
    tile: int = DEFAULT_TILE,
    flops: FlopCounter | None = None,
) -> TopKResult:
    """Threshold-then-gather variant; result is identical to streaming_topk.

    Pass 1 streams tiles through a k-wide score-only buffer to find each
    query's k-th largest score. Pass 2 recomputes the same tile products
    and keeps indices scoring above the threshold, filling the remaining
    slots with threshold ties in ascending index order.
    """
    q_lr, k_lr, k = _prep(q_lr, k_lr, k)
    s_q, s_k = q_lr.shape[0], k_lr.shape[0]
    tile = max(1, int(tile))

    thresholds = np.full(s_q, -np.inf)
    q_step = _query_block(s_q)
    for q0 in range(0, s_q, q_step):
        q1 = min(q0 + q_step, s_q)
        top_scores = np.full((q1 - q0, k), -np.inf)
        for c0 in range(0, s_k, tile):
            c1 = min(c0 + tile, s_k)
            tile_scores = q_lr[q0:q1] @ k_lr[c0:c1].T
            cat = np.concatenate([top_scores, tile_scores], axis=1)
            n = cat.shape[1]
            # kth largest lands at column n-k; columns right of it are the rest
            top_scores = np.partition(cat, n - k, axis=1)[:, n - k:]
            if flops is not None:
                flops.estimation += tile_scores.size * 2 * q_lr.shape[1]
                flops.selection += tile_scores.size
        thresholds[q0:q1] = top_scores[:, 0]

    indices = np.empty((s_q, k), dtype=np.int64)
    for q0 in range(0, s_q, q_step):
        q1 = min(q0 + q_step, s_q)
        above_count = np.zeros(q1 - q0, dtype=np.int64)
        above = [[] for _ in range(q1 - q0)]
        at = [[] for _ in range(q1 - q0)]
        for c0 in range(0, s_k, tile):
            c1 = min(c0 + tile, s_k)
            tile_scores = q_lr[q0:q1] @ k_lr[c0:c1].T
            if flops is not None:
                flops.estimation += tile_scores.size * 2 * q_lr.shape[1]
                flops.selection += tile_scores.size
            for r in range(q1 - q0):
                row = tile_scores[r]
                hi = np.nonzero(row > thresholds[q0 + r])[0]
                eq = np.nonzero(row == thresholds[q0 + r])[0]
                if hi.size:
                    above[r].append(hi + c0)
                    above_count[r] += hi.size
                if eq.size and above_count[r] + _len_cat(at[r]) < k:
                    at[r].append(eq + c0)
        for r in range(q1 - q0):
            hi = np.concatenate(above[r]) if above[r] else np.empty(0, np.int64)
            eq = np.concatenate(at[r]) if at[r] else np.empty(0, np.int64)
            need = k - hi.size
            # ties beyond k are trimmed by lower-index preference
            sel = np.concatenate([hi, eq[:need]])
            indices[q0 + r] = np.sort(sel)
    return TopKResult(indices=indices, thresholds=thresholds.copy(), k=k)


def _len_cat(chunks: list) -> int:
    return sum(c.size for c in chunks)
