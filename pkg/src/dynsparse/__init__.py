"""Dynamic-sparsity attention engine.

Reference attention math with critical-KV oracles, sampled sparsity
profiling, trainable low-rank score predictors, streaming top-k
selection, voxel query grouping, a full-vs-sparse dispatcher, and a
cost model plus deterministic simulator for hybrid sparsity-aware
context parallelism.
"""

__version__ = "0.1.0"

from .attention import (
    CriticalIndexSet,
    analyze_distribution,
    attention_scores,
    critical_kv_oracle,
    full_attention,
    head_sparsity,
    sparse_attention,
)
from .grid import TokenGrid
from .profiler import SampleConfig, SparsityProfile, ema_update, measure_block_sparsity, sample_queries
from .selection import AllocationMeter, TopKResult, k_from_sparsity, streaming_topk, twopass_select

__all__ = [
    "__version__",
    "AllocationMeter",
    "CriticalIndexSet",
    "SampleConfig",
    "SparsityProfile",
    "TokenGrid",
    "TopKResult",
    "analyze_distribution",
    "attention_scores",
    "critical_kv_oracle",
    "ema_update",
    "full_attention",
    "head_sparsity",
    "k_from_sparsity",
    "measure_block_sparsity",
    "sample_queries",
    "sparse_attention",
    "streaming_topk",
    "twopass_select",
]
