"""Integer FLOP accounting for full, sparse, and estimation paths.

All counts are exact integers derived from the number of (query, key)
pairs actually touched, so the sparse/full ratio is definitional:
a path that scores m pairs costs m * pair cost, full attention scores
S*S pairs. Per-query overhead (row max, normalisation) is tracked in a
separate counter because it does not shrink with sparsity.
"""

from dataclasses import dataclass, field


def pair_cost(d_k: int) -> int:
    """Ops per scored (query, key) pair: score dot, exp+accumulate, value FMA."""
    return 4 * d_k + 3


def full_score_value_flops(s: int, d_k: int) -> int:
    """Score-value ops for dense attention over all S*S pairs."""
    return s * s * pair_cost(d_k)


def full_score_flops(s: int, d_k: int) -> int:
    """Ops for the dense score product Q K^T alone (2*d_k per pair)."""
    return s * s * 2 * d_k


def sparse_score_value_flops(pairs: int, d_k: int) -> int:
    """Score-value ops for sparse attention touching `pairs` (q, k) pairs."""
    return pairs * pair_cost(d_k)


def estimation_flops(s: int, d_lr: int) -> int:
    """Ops for the low-rank score product Q_lr K_lr^T (2*d_lr per pair)."""
    return s * s * 2 * d_lr


def projection_flops(s: int, d: int, d_lr: int) -> int:
    """Ops for projecting one S x d input to S x d_lr (both Q and K sides)."""
    return 2 * (2 * s * d * d_lr)


@dataclass
class FlopCounter:
    """Mutable tally passed into instrumented operations."""

    score_value: int = 0      # per-pair score + value work
    per_query: int = 0        # row max / normalisation, proportional to queries
    projection: int = 0       # low-rank input projections
    estimation: int = 0       # Q_lr K_lr^T products
    selection: int = 0        # top-k candidate comparisons
    extra: dict = field(default_factory=dict)

    def total(self) -> int:
        return (
            self.score_value
            + self.per_query
            + self.projection
            + self.estimation
            + self.selection
        )

    def add_pairs(self, pairs: int, d_k: int) -> None:
        self.score_value += sparse_score_value_flops(pairs, d_k)

    def add_per_query(self, queries: int, keys_hint: int = 0) -> None:
        # one max pass + one divide per query row; keys_hint unused in the
        # count (pair work already covers per-key terms) but kept for clarity
        self.per_query += 2 * queries
