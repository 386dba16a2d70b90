"""Independent brute-force oracles used to check the package implementations.

Everything here is deliberately written the slow, obvious way (scalar
loops, full materialisation, exhaustive search) and shares no code with
the package's computation paths.
"""

import math

import numpy as np


def naive_softmax_rows(logits):
    out = np.zeros_like(np.asarray(logits, dtype=np.float64))
    for i in range(out.shape[0]):
        row_max = -math.inf
        for j in range(out.shape[1]):
            row_max = max(row_max, logits[i][j])
        denom = 0.0
        for j in range(out.shape[1]):
            out[i, j] = math.exp(logits[i][j] - row_max)
            denom += out[i, j]
        for j in range(out.shape[1]):
            out[i, j] /= denom
    return out


def naive_attention(q, k, v):
    """Double-loop softmax attention, float64."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s_q, d_k = q.shape
    s_k = k.shape[0]
    logits = np.zeros((s_q, s_k))
    for i in range(s_q):
        for j in range(s_k):
            acc = 0.0
            for c in range(d_k):
                acc += q[i, c] * k[j, c]
            logits[i, j] = acc / math.sqrt(d_k)
    weights = naive_softmax_rows(logits)
    out = np.zeros((s_q, v.shape[1]))
    for i in range(s_q):
        for j in range(s_k):
            for c in range(v.shape[1]):
                out[i, c] += weights[i, j] * v[j, c]
    return out


def naive_topk(q_lr, k_lr, k):
    """Materialise the full product, per-row sort with lower-index ties."""
    scores = np.asarray(q_lr, dtype=np.float64) @ np.asarray(k_lr, dtype=np.float64).T
    s_q, s_k = scores.shape
    indices = np.empty((s_q, k), dtype=np.int64)
    thresholds = np.empty(s_q)
    for row in range(s_q):
        order = sorted(range(s_k), key=lambda j: (-scores[row, j], j))
        chosen = order[:k]
        thresholds[row] = scores[row, chosen[-1]]
        indices[row] = np.sort(chosen)
    return indices, thresholds


def naive_critical_prefix(score_row, theta):
    """Sort-and-scan minimal prefix reaching cumulative mass theta."""
    order = sorted(range(len(score_row)), key=lambda j: (-score_row[j], j))
    csum = 0.0
    total = float(np.sum(score_row))
    target = min(theta, total) - 1e-9
    chosen = []
    for j in order:
        chosen.append(j)
        csum += score_row[j]
        if csum >= target:
            break
    return sorted(chosen)


def brute_force_min_max_partition(loads, n):
    """Optimal P||Cmax value via subset-sum dynamic programming."""
    loads = list(loads)
    h = len(loads)
    full = (1 << h) - 1
    subset_sum = [0.0] * (1 << h)
    for mask in range(1, 1 << h):
        low = mask & (-mask)
        subset_sum[mask] = subset_sum[mask ^ low] + loads[low.bit_length() - 1]

    memo = {}

    def best(mask, bins):
        if bins == 1:
            return subset_sum[mask]
        key = (mask, bins)
        if key in memo:
            return memo[key]
        value = math.inf
        sub = mask
        while sub:
            rest = mask ^ sub
            value = min(value, max(subset_sum[sub], best(rest, bins - 1)))
            sub = (sub - 1) & mask
        # empty first bin is also allowed
        value = min(value, best(mask, bins - 1))
        memo[key] = value
        return value

    return best(full, n)


def finite_difference_grad(fn, w, h=1e-5):
    """Central finite differences of a scalar function of a matrix."""
    grad = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            orig = w[i, j]
            w[i, j] = orig + h
            up = fn()
            w[i, j] = orig - h
            down = fn()
            w[i, j] = orig
            grad[i, j] = (up - down) / (2 * h)
    return grad
