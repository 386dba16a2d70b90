"""Dense reference attention, the critical-KV oracle, and sparse attention.

This module is the numerical ground truth for everything else: all math is
done in the input precision (float64 by default, float32 accepted for the
throughput mode), softmax is computed with max-subtraction, and selection
ties always resolve toward the lower key index.

Definitions
-----------
Attention scores for a query row q are ``softmax(q . k_i / sqrt(d_k))``
over all keys. The critical KV set of a query at threshold ``theta`` is
the minimal prefix of its descending-sorted scores whose cumulative mass
reaches ``theta``. The sparsity of a head is the mean fraction of
non-critical pairs across queries.
"""

from dataclasses import dataclass

import numpy as np

from .flops import FlopCounter
from .grid import TokenGrid
from .validate import as_matrix, check_same_cols, check_unit_interval

# Tolerance used when deciding whether a cumulative mass has reached theta;
# absorbs the +-1e-6 slack that softmax rows carry. theta=1.0 must select
# every index even when a row sums to 1 - 1e-9.
_MASS_EPS = 1e-9


@dataclass
class CriticalIndexSet:
    """Per-query selected KV indices.

    ``indices[q]`` is a sorted, unique int64 array of key indices kept for
    query q. ``theta`` records the cumulative-mass threshold that produced
    the set; it is None for size-based (top-k) selections.
    """

    indices: list
    theta: float | None = None

    def __post_init__(self):
        if self.theta is not None:
            self.theta = check_unit_interval("theta", self.theta, open_low=True)
        cleaned = []
        for q, idx in enumerate(self.indices):
            idx = np.asarray(idx, dtype=np.int64)
            if idx.ndim != 1:
                raise ValueError(f"index list for query {q} must be 1D")
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
                raise ValueError(f"indices for query {q} must be sorted, unique, nonnegative")
            cleaned.append(idx)
        self.indices = cleaned

    @property
    def n_queries(self) -> int:
        return len(self.indices)

    def sizes(self) -> np.ndarray:
        return np.array([idx.size for idx in self.indices], dtype=np.int64)

    def total_pairs(self) -> int:
        return int(self.sizes().sum())

    def uniform_k(self) -> int | None:
        """The shared set size if all queries keep the same count, else None."""
        sizes = self.sizes()
        if sizes.size and np.all(sizes == sizes[0]):
            return int(sizes[0])
        return None

    def as_array(self) -> np.ndarray:
        """(S, k) index matrix; only valid for uniform set sizes."""
        k = self.uniform_k()
        if k is None:
            raise ValueError("index set is ragged; no uniform (S, k) form")
        return np.stack(self.indices) if k else np.empty((self.n_queries, 0), np.int64)


def _prep_qk(q, k):
    q = as_matrix("Q", q)
    k = as_matrix("K", k)
    check_same_cols("Q", q, "K", k)
    return q, k


def _stable_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def full_attention(q, k, v, *, flops: FlopCounter | None = None) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V with a max-subtracted softmax.

    Q and K must share d_k; V must have as many rows as K. The output has
    shape (S_q, d_v) in the input dtype.
    """
    q, k = _prep_qk(q, k)
    v = as_matrix("V", v)
    if v.shape[0] != k.shape[0]:
        raise ValueError(f"V has {v.shape[0]} rows but K has {k.shape[0]}")
    weights = _stable_softmax_rows(q @ k.T / q.dtype.type(np.sqrt(q.shape[1])))
    if flops is not None:
        flops.add_pairs(q.shape[0] * k.shape[0], q.shape[1])
        flops.add_per_query(q.shape[0])
    return weights @ v


def attention_scores(q, k) -> np.ndarray:
    """Post-softmax score matrix; every row sums to 1 within 1e-6."""
    q, k = _prep_qk(q, k)
    return _stable_softmax_rows(q @ k.T / q.dtype.type(np.sqrt(q.shape[1])))


def critical_kv_oracle(scores, theta: float) -> CriticalIndexSet:
    """Minimal descending-score prefix reaching cumulative mass theta.

    Per query, keys are ranked by score with ties broken toward the lower
    index, and the shortest prefix whose mass is >= theta is kept. This is
    the brute-force reference that predictors are measured against.
    """
    theta = check_unit_interval("theta", theta, open_low=True)
    scores = as_matrix("scores", scores)
    s_total = scores.shape[1]
    if np.any(scores < 0):
        raise ValueError("scores must be nonnegative (post-softmax)")
    selected = []
    col_range = np.arange(s_total)
    for row in scores:
        # primary key: descending score; secondary: ascending index
        order = np.lexsort((col_range, -row))
        csum = np.cumsum(row[order])
        target = min(theta, csum[-1]) - _MASS_EPS
        n_keep = int(np.searchsorted(csum, target, side="left")) + 1
        n_keep = min(n_keep, s_total)
        selected.append(np.sort(order[:n_keep]))
    return CriticalIndexSet(selected, theta=theta)


def head_sparsity(idx: CriticalIndexSet, s_total: int) -> float:
    """Mean over queries of the non-critical fraction (S - |I_q|) / S."""
    if s_total < 1:
        raise ValueError("s_total must be positive")
    sizes = idx.sizes()
    if np.any(sizes > s_total):
        raise ValueError("index set references more keys than s_total")
    return float(np.mean((s_total - sizes) / s_total))


def sparse_attention(q, k, v, idx: CriticalIndexSet, *, flops: FlopCounter | None = None) -> np.ndarray:
    """Attention restricted to each query's selected keys.

    The softmax is renormalised over the selected logits only, so the
    complete index set reproduces full_attention exactly. Every query must
    keep at least one key.
    """
    q, k = _prep_qk(q, k)
    v = as_matrix("V", v)
    if idx.n_queries != q.shape[0]:
        raise ValueError(f"index set covers {idx.n_queries} queries, Q has {q.shape[0]}")
    sizes = idx.sizes()
    if np.any(sizes == 0):
        raise ValueError("every query needs at least one selected index")
    scale = q.dtype.type(np.sqrt(q.shape[1]))

    if idx.uniform_k() is not None:
        gathered = idx.as_array()                       # (S, k)
        # one fused gather of [K | V] rows; fancy indexing is the hot path
        kv = np.concatenate([k, v], axis=1)[gathered]   # (S, k, d_k + d_v)
        logits = np.einsum("qd,qkd->qk", q, kv[:, :, : k.shape[1]]) / scale
        weights = _stable_softmax_rows(logits)
        out = np.einsum("qk,qkd->qd", weights, kv[:, :, k.shape[1]:])
    else:
        out = np.empty((q.shape[0], v.shape[1]), dtype=v.dtype)
        for row, sel in enumerate(idx.indices):
            logits = (q[row] @ k[sel].T) / scale
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
            out[row] = w @ v[sel]
    if flops is not None:
        flops.add_pairs(idx.total_pairs(), q.shape[1])
        flops.add_per_query(q.shape[0])
    return out


def analyze_distribution(
    scores,
    grid: TokenGrid | None = None,
    *,
    theta: float = 0.9,
    top_fraction: float = 0.1,
    mass_threshold: float = 0.9,
    n_bins: int = 50,
) -> dict:
    """Score-distribution statistics over a post-softmax matrix.

    Reports a log-spaced score histogram, the fraction of queries whose
    top ``top_fraction`` of keys carries at least ``mass_threshold`` of
    the row mass, and (when a grid is supplied) the mean Euclidean
    grid-coordinate distance from each query to its critical keys.
    """
    scores = as_matrix("scores", scores)
    s_total = scores.shape[1]
    top_n = max(1, int(np.ceil(top_fraction * s_total)))

    sorted_desc = -np.sort(-scores, axis=1)
    top_mass = sorted_desc[:, :top_n].sum(axis=1)
    concentrated = float(np.mean(top_mass >= mass_threshold - _MASS_EPS))

    positive = scores[scores > 0]
    lo = max(positive.min(), 1e-12) if positive.size else 1e-12
    edges = np.logspace(np.log10(lo), 0.0, n_bins + 1)
    hist, _ = np.histogram(scores, bins=edges)

    report = {
        "n_queries": int(scores.shape[0]),
        "n_keys": int(s_total),
        "top_fraction": float(top_fraction),
        "mass_threshold": float(mass_threshold),
        "top_mass_fraction_mean": float(top_mass.mean()),
        "concentrated_query_fraction": concentrated,
        "histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
    }

    if grid is not None:
        if grid.size != s_total or scores.shape[0] != s_total:
            raise ValueError(
                f"grid distance statistics need square S x S scores with "
                f"S = {grid.size}, got {scores.shape}"
            )
        coords = grid.coords_array().astype(np.float64)
        critical = critical_kv_oracle(scores, theta)
        per_query = np.empty(scores.shape[0])
        within5 = 0
        beyond10 = 0
        total = 0
        for row, sel in enumerate(critical.indices):
            d = np.linalg.norm(coords[sel] - coords[row], axis=1)
            per_query[row] = d.mean()
            within5 += int(np.sum(d <= 5.0))
            beyond10 += int(np.sum(d > 10.0))
            total += sel.size
        report["critical_kv"] = {
            "theta": float(theta),
            "mean_distance": float(per_query.mean()),
            "fraction_within_radius_5": within5 / total,
            "fraction_beyond_radius_10": beyond10 / total,
        }
    return report
