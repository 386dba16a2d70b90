"""Per-block gate between full and sparse attention.

A calibrated cost table maps (token length, sparsity) buckets to measured
times, exact FLOP counts, and the index-memory footprint of the sparse
path. The dispatch decision for a block is then two comparisons: its
profiled sparsity against the length bucket's crossover, and the index
memory against the free budget.

Calibration supports two time sources: ``wallclock`` (median of repeated
runs on synthetic inputs) and ``model`` (deterministic times derived from
the FLOP counts at a nominal rate, used where byte-identical replay is
required).
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import flops as F
from . import serialize
from .attention import CriticalIndexSet, full_attention, sparse_attention
from .selection import k_from_sparsity, streaming_topk

SPARSITY_STEP = 0.05  # sparsity bucket width
_MODEL_RATE = 1e9     # synthetic "ops per second" for the model time source


def length_bucket(length: int) -> int:
    """Power-of-two bucket: smallest 2^i >= length."""
    if length < 1:
        raise ValueError("length must be positive")
    return 1 << int(np.ceil(np.log2(length)))


def sparsity_bucket(sparsity: float) -> float:
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    # epsilon guards against 0.7 / 0.05 landing just below the integer edge
    return float(round(np.floor(sparsity / SPARSITY_STEP + 1e-9) * SPARSITY_STEP, 10))


@dataclass
class CostEntry:
    length: int
    sparsity: float
    full_time: float
    sparse_time: float
    estimation_time: float
    index_bytes: int
    full_flops: int
    sparse_flops: int
    estimation_flops: int
    selection_flops: int


@dataclass
class CostProfileTable:
    entries: dict = field(default_factory=dict)  # (length, sparsity) -> CostEntry
    index_width: int = 4

    def add(self, entry: CostEntry) -> None:
        self.entries[(entry.length, entry.sparsity)] = entry

    def lengths(self) -> list:
        return sorted({length for length, _ in self.entries})

    def sparsities(self, length: int) -> list:
        return sorted(s for (l, s) in self.entries if l == length)

    def nearest_length(self, length: int):
        """(bucket, was_fallback) for a query length."""
        lengths = self.lengths()
        if not lengths:
            raise ValueError("cost table is empty")
        bucket = length_bucket(length)
        if bucket in lengths:
            return bucket, False
        nearest = min(lengths, key=lambda l: (abs(l - bucket), l))
        return nearest, True

    def crossover(self, length: int) -> float | None:
        """Smallest calibrated sparsity where the sparse path wins, or None."""
        for s in self.sparsities(length):
            e = self.entries[(length, s)]
            if e.sparse_time + e.estimation_time < e.full_time:
                return s
        return None

    _INT_FIELDS = ("length", "index_bytes", "full_flops", "sparse_flops",
                   "estimation_flops", "selection_flops")
    _FLOAT_FIELDS = ("sparsity", "full_time", "sparse_time", "estimation_time")

    def to_csv(self, path) -> None:
        fields = [
            "length", "sparsity", "full_time", "sparse_time", "estimation_time",
            "index_bytes", "full_flops", "sparse_flops", "estimation_flops",
            "selection_flops",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields + ["index_width"])
            for key in sorted(self.entries):
                e = self.entries[key]
                row = [
                    repr(int(getattr(e, f))) if f in self._INT_FIELDS
                    else repr(float(getattr(e, f)))
                    for f in fields
                ]
                writer.writerow(row + [self.index_width])

    @classmethod
    def from_csv(cls, path) -> "CostProfileTable":
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                table.index_width = int(row["index_width"])
                table.add(CostEntry(
                    length=int(row["length"]),
                    sparsity=float(row["sparsity"]),
                    full_time=float(row["full_time"]),
                    sparse_time=float(row["sparse_time"]),
                    estimation_time=float(row["estimation_time"]),
                    index_bytes=int(row["index_bytes"]),
                    full_flops=int(row["full_flops"]),
                    sparse_flops=int(row["sparse_flops"]),
                    estimation_flops=int(row["estimation_flops"]),
                    selection_flops=int(row["selection_flops"]),
                ))
        return table


def index_memory_bytes(s_total: int, k: int, index_width: int = 4) -> int:
    """Bytes for per-query index buffers; matches the raw serialised payload."""
    return s_total * k * index_width


def _time_paths(s, k, d_k, d_lr, reps, rng, dtype):
    """Median wall times for the full and (estimate+select+sparse) paths."""
    q = rng.standard_normal((s, d_k)).astype(dtype)
    kk = rng.standard_normal((s, d_k)).astype(dtype)
    v = rng.standard_normal((s, d_k)).astype(dtype)
    q_lr = rng.standard_normal((s, d_lr)).astype(dtype)
    k_lr = rng.standard_normal((s, d_lr)).astype(dtype)

    full_times, est_times, sparse_times = [], [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        full_attention(q, kk, v)
        full_times.append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        top = streaming_topk(q_lr, k_lr, k, tile=512)
        est_times.append(time.perf_counter() - t0)

        idx = top.to_index_set()
        t0 = time.perf_counter()
        sparse_attention(q, kk, v, idx)
        sparse_times.append(time.perf_counter() - t0)
    return (
        float(np.median(full_times)),
        float(np.median(sparse_times)),
        float(np.median(est_times)),
    )


def calibrate(
    lengths,
    sparsities,
    reps: int = 5,
    *,
    d_k: int = 64,
    d_lr: int = 16,
    seed: int = 0,
    dtype=np.float32,
    index_width: int = 4,
    time_source: str = "wallclock",
) -> CostProfileTable:
    """Build a cost table over a (length, sparsity) grid.

    FLOP counts are exact by construction; times come from either median
    wall clocks or the deterministic FLOP model.
    """
    if not lengths or not sparsities:
        raise ValueError("need nonempty length and sparsity grids")
    if time_source not in ("wallclock", "model"):
        raise ValueError(f"unknown time source {time_source!r}")
    table = CostProfileTable(index_width=index_width)
    rng = np.random.default_rng(seed)
    for length in lengths:
        bucket = length_bucket(length)
        for sparsity in sparsities:
            s_bucket = sparsity_bucket(sparsity)
            k = k_from_sparsity(s_bucket, bucket)
            pairs = bucket * k
            full_flops = F.full_score_value_flops(bucket, d_k)
            sparse_flops = F.sparse_score_value_flops(pairs, d_k)
            estimation_flops = F.estimation_flops(bucket, d_lr)
            selection_flops = bucket * bucket  # one comparison per candidate
            if time_source == "wallclock":
                full_t, sparse_t, est_t = _time_paths(
                    bucket, k, d_k, d_lr, reps, rng, dtype
                )
            else:
                full_t = full_flops / _MODEL_RATE
                sparse_t = sparse_flops / _MODEL_RATE
                est_t = (estimation_flops + selection_flops) / _MODEL_RATE
            table.add(CostEntry(
                length=bucket,
                sparsity=s_bucket,
                full_time=full_t,
                sparse_time=sparse_t,
                estimation_time=est_t,
                index_bytes=index_memory_bytes(bucket, k, index_width),
                full_flops=full_flops,
                sparse_flops=sparse_flops,
                estimation_flops=estimation_flops,
                selection_flops=selection_flops,
            ))
    return table


@dataclass
class DispatchDecision:
    block: int
    enabled: bool
    reason: str  # "enabled" | "sparsity below threshold" | "memory exceeded"
    k: int
    length_bucket: int
    bucket_fallback: bool = False


def decide(
    block_sparsity: float,
    length: int,
    mem_free: int,
    table: CostProfileTable,
    *,
    block: int = 0,
) -> DispatchDecision:
    """Enable sparse attention iff sparsity >= crossover and memory fits.

    The sparsity gate is inclusive at the crossover. An uncalibrated
    length falls back to the nearest bucket with ``bucket_fallback`` set.
    """
    if not 0.0 <= block_sparsity < 1.0:
        raise ValueError(f"block sparsity must lie in [0, 1), got {block_sparsity}")
    bucket, fallback = table.nearest_length(length)
    k = k_from_sparsity(block_sparsity, length)
    needed = index_memory_bytes(length, k, table.index_width)

    crossover = table.crossover(bucket)
    if crossover is None or block_sparsity < crossover:
        return DispatchDecision(block, False, "sparsity below threshold",
                                k, bucket, fallback)
    if needed > mem_free:
        return DispatchDecision(block, False, "memory exceeded", k, bucket, fallback)
    return DispatchDecision(block, True, "enabled", k, bucket, fallback)


def serialized_index_bytes(s_total: int, k: int, index_width: int = 4) -> int:
    """Actual raw-payload size for uniform (S, k) index buffers."""
    dummy = [np.arange(k, dtype=np.int64)] * s_total
    return len(serialize.raw_index_payload(dummy, index_width))


def make_index_set_for_length(s_total: int, k: int) -> CriticalIndexSet:
    """Helper for memory checks: a dense uniform top-k shaped set."""
    return CriticalIndexSet([np.arange(k, dtype=np.int64)] * s_total, theta=None)
