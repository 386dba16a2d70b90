"""Sampled sparsity measurement and EMA-smoothed per-head state.

The profiler never materialises an S x S score matrix: it draws a subset
of query rows, scores only those rows against all keys, and feeds each
head's measured sparsity into an exponential moving average keyed by
(block, head).
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import critical_kv_oracle, head_sparsity
from .validate import as_matrix, check_same_cols, check_unit_interval


@dataclass
class SampleConfig:
    """Query sampling and profiling cadence."""

    factor: int = 16
    seed: int = 0
    stage1_period: int = 50
    stage2_period: int = 500

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("sampling factor must be >= 1")
        if self.stage1_period < 1 or self.stage2_period < 1:
            raise ValueError("profiling periods must be >= 1")


def sample_queries(s_total: int, cfg: SampleConfig, seed: int | None = None) -> np.ndarray:
    """ceil(S / factor) distinct query rows, uniform without replacement.

    Deterministic for a given seed (cfg.seed unless overridden); returned
    sorted ascending.
    """
    if s_total < 1:
        raise ValueError("s_total must be positive")
    if s_total < cfg.factor:
        raise ValueError(f"need S >= factor, got S={s_total}, factor={cfg.factor}")
    n = int(np.ceil(s_total / cfg.factor))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return np.sort(rng.choice(s_total, size=n, replace=False))


def measure_block_sparsity(
    qs,
    ks,
    theta: float,
    cfg: SampleConfig,
    seed: int | None = None,
) -> np.ndarray:
    """Per-head sparsity of the critical-KV oracle on sampled query rows.

    ``qs`` and ``ks`` are sequences of per-head (S, d_k) tensors. Scores
    are computed only for the sampled rows.
    """
    if len(qs) != len(ks) or not qs:
        raise ValueError("need matching, nonempty per-head Q and K lists")
    theta = check_unit_interval("theta", theta, open_low=True)
    first_q = as_matrix("Q[0]", qs[0])
    s_total = first_q.shape[0]
    rows = sample_queries(s_total, cfg, seed=seed)

    values = np.empty(len(qs))
    for h, (q, k) in enumerate(zip(qs, ks)):
        q = as_matrix(f"Q[{h}]", q)
        k = as_matrix(f"K[{h}]", k)
        check_same_cols("Q", q, "K", k)
        if q.shape[0] != s_total or k.shape[0] != s_total:
            raise ValueError("all heads must share the token count")
        logits = q[rows] @ k.T / np.sqrt(q.shape[1])
        logits -= logits.max(axis=1, keepdims=True)
        scores = np.exp(logits)
        scores /= scores.sum(axis=1, keepdims=True)
        values[h] = head_sparsity(critical_kv_oracle(scores, theta), s_total)
    return values


def ema_update(prev: float, sample: float, alpha: float) -> float:
    """alpha * sample + (1 - alpha) * prev, all arguments in [0, 1]."""
    prev = check_unit_interval("prev", prev)
    sample = check_unit_interval("sample", sample)
    alpha = check_unit_interval("alpha", alpha, open_low=True)
    return alpha * sample + (1.0 - alpha) * prev


@dataclass
class _HeadState:
    ema: float
    sample: float
    iteration: int


@dataclass
class SparsityProfile:
    """EMA-smoothed sparsity per (block, head)."""

    alpha: float = 0.1
    _state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = check_unit_interval("alpha", self.alpha, open_low=True)

    def update(self, block: int, head: int, sample: float, iteration: int) -> float:
        key = (int(block), int(head))
        prev = self._state[key].ema if key in self._state else sample
        ema = ema_update(prev, sample, self.alpha)
        self._state[key] = _HeadState(ema=ema, sample=float(sample), iteration=int(iteration))
        return ema

    def update_block(self, block: int, samples, iteration: int) -> np.ndarray:
        return np.array([
            self.update(block, head, float(s), iteration) for head, s in enumerate(samples)
        ])

    def ema(self, block: int, head: int) -> float:
        return self._state[(block, head)].ema

    def head_emas(self, block: int) -> np.ndarray:
        heads = sorted(h for (b, h) in self._state if b == block)
        return np.array([self._state[(block, h)].ema for h in heads])

    def block_mean(self, block: int) -> float:
        return float(self.head_emas(block).mean())

    def blocks(self) -> list:
        return sorted({b for (b, _) in self._state})

    def snapshot(self) -> dict:
        """JSON-ready dict keyed block -> head -> {ema, sample, iteration}."""
        out = {"alpha": self.alpha, "blocks": {}}
        for (block, head), st in sorted(self._state.items()):
            entry = out["blocks"].setdefault(str(block), {})
            entry[str(head)] = {
                "ema": st.ema,
                "sample": st.sample,
                "iteration": st.iteration,
            }
        return out

    @classmethod
    def from_snapshot(cls, data: dict) -> "SparsityProfile":
        profile = cls(alpha=data.get("alpha", 0.1))
        for block, heads in data.get("blocks", {}).items():
            for head, st in heads.items():
                profile._state[(int(block), int(head))] = _HeadState(
                    ema=float(st["ema"]),
                    sample=float(st["sample"]),
                    iteration=int(st["iteration"]),
                )
        return profile
