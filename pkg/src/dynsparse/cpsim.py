"""Deterministic logical simulator for hybrid sparsity-aware CP.

Devices are plain objects exchanging numpy arrays through an in-memory
bus; every message is recorded in a ledger with its logical payload size
(rows x dims x the cluster's element width, indices at ``index_width``
bytes), so volumes can be checked byte-exactly against the closed forms
in cpmodel. Wall-clock behaviour is out of scope.

Phases, barrier-ordered:

1. ``hcp_fwd``             Q/K/V re-shard: every device ends with its
                           assigned heads over its HCP group's span.
2. ``scp_index_exchange``  per-head requested-row lists plus an 8-byte
                           per-head count preamble (uneven all-to-all
                           sizing is accounted here).
3. ``scp_kv``              requested K and V rows only.
4. ``output_redistribute`` outputs return to the original layout; runs
                           only along the HCP dimension since outputs are
                           already query-local under SCP.
"""

from dataclasses import dataclass, field

import numpy as np

from .cpmodel import AlphaMatrix, ClusterSpec, CPConfig, rank_layout

PHASES = ("hcp_fwd", "scp_index_exchange", "scp_kv", "output_redistribute")


class ProtocolError(Exception):
    """A device requested rows outside the owner's chunk (ownership bug)."""


@dataclass
class Message:
    phase: str
    sender: int
    receiver: int
    n_bytes: int


@dataclass
class MessageLog:
    records: list = field(default_factory=list)

    def add(self, phase: str, sender: int, receiver: int, n_bytes: int) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.records.append(Message(phase, sender, receiver, int(n_bytes)))

    def sent_by(self, rank: int, phase: str) -> int:
        return sum(m.n_bytes for m in self.records
                   if m.sender == rank and m.phase == phase)

    def received_by(self, rank: int, phase: str) -> int:
        return sum(m.n_bytes for m in self.records
                   if m.receiver == rank and m.phase == phase)

    def phase_total(self, phase: str) -> int:
        return sum(m.n_bytes for m in self.records if m.phase == phase)

    def to_json(self) -> dict:
        return {
            "messages": [
                {"phase": m.phase, "sender": m.sender,
                 "receiver": m.receiver, "bytes": m.n_bytes}
                for m in self.records
            ],
            "phase_totals": {p: self.phase_total(p) for p in PHASES},
        }


@dataclass
class SimDevice:
    rank: int
    node: int
    position: int            # slot within the HCP group (head owner id)
    group: int                # HCP group id == SCP span id
    chunk_rows: np.ndarray    # global rows initially resident
    q: np.ndarray             # [H, chunk, D] before HCP, [H_r, span, D] after
    k: np.ndarray
    v: np.ndarray
    heads: np.ndarray = None          # assigned head ids (set by HCP phase)
    span_rows: np.ndarray = None      # global rows after HCP
    remote_kv: dict = field(default_factory=dict)  # head -> {row: (k, v)}


def make_devices(q, k, v, cluster: ClusterSpec, config: CPConfig) -> list:
    """Shard [H, S, D] tensors into one contiguous chunk per rank."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise ValueError("Q, K, V must share an [H, S, D] shape")
    n = cluster.n_devices
    h_total, s_total, _ = q.shape
    if s_total % n:
        raise ValueError("sequence length must divide the device count")
    if config.g_h * config.g_s != n:
        raise ValueError("g_h * g_s must equal the device count")
    if config.plan.assignment.size != h_total:
        raise ValueError("plan covers a different head count")
    chunk = s_total // n
    layout = rank_layout(n, config.g_h, config.g_s, config.placement)
    devices = []
    for rank in range(n):
        pos, grp = layout[rank]
        rows = np.arange(rank * chunk, (rank + 1) * chunk)
        devices.append(SimDevice(
            rank=rank,
            node=cluster.node_of(rank),
            position=pos,
            group=grp,
            chunk_rows=rows,
            q=q[:, rows, :].copy(),
            k=k[:, rows, :].copy(),
            v=v[:, rows, :].copy(),
        ))
    return devices


def _group_members(devices, group):
    return sorted((d for d in devices if d.group == group), key=lambda d: d.position)


def load_balance_hcp(devices, config: CPConfig, cluster: ClusterSpec,
                     log: MessageLog) -> None:
    """Permute heads per the plan and run the uneven QKV all-to-all.

    After this phase each device holds full-group-span Q/K/V for exactly
    its assigned heads, rows ordered by global sequence index.
    """
    assignment = config.plan.assignment
    width = cluster.elem_width
    groups = sorted({d.group for d in devices})
    for grp in groups:
        members = _group_members(devices, grp)
        span = np.sort(np.concatenate([m.chunk_rows for m in members]))
        order = {row: i for i, row in enumerate(span)}
        buffers = {}
        for dst in members:
            heads = np.nonzero(assignment == dst.position)[0]
            shape = (heads.size, span.size, dst.q.shape[2])
            buffers[dst.rank] = (
                heads,
                np.empty(shape), np.empty(shape), np.empty(shape),
            )
        for src in members:
            rows_at = np.array([order[r] for r in src.chunk_rows])
            for dst in members:
                heads, bq, bk, bv = buffers[dst.rank]
                bq[:, rows_at, :] = src.q[heads]
                bk[:, rows_at, :] = src.k[heads]
                bv[:, rows_at, :] = src.v[heads]
                if src.rank != dst.rank:
                    payload = 3 * heads.size * src.chunk_rows.size * src.q.shape[2]
                    log.add("hcp_fwd", src.rank, dst.rank, payload * width)
        for dst in members:
            heads, bq, bk, bv = buffers[dst.rank]
            dst.heads = heads
            dst.span_rows = span
            dst.q, dst.k, dst.v = bq, bk, bv


def selective_comm_scp(devices, index_sets, config: CPConfig, cluster: ClusterSpec,
                       log: MessageLog, index_width: int = 4) -> None:
    """Three-step selective KV gathering within each SCP group.

    ``index_sets`` holds, per head, one global index array per query.
    Requests are per head; each owner serves exactly the requested rows.
    """
    width = cluster.elem_width
    positions = sorted({d.position for d in devices})
    for pos in positions:
        members = sorted((d for d in devices if d.position == pos),
                         key=lambda d: d.group)
        owned = {m.group: set(m.span_rows.tolist()) for m in members}
        requests = {}
        for me in members:
            for peer in members:
                if peer.group == me.group:
                    continue
                per_head = []
                for h in me.heads:
                    needed = set()
                    for gq in me.span_rows:
                        needed.update(
                            int(x) for x in index_sets[h][gq]
                            if int(x) in owned[peer.group]
                        )
                    per_head.append(np.array(sorted(needed), dtype=np.int64))
                requests[(me.rank, peer.rank)] = per_head
                n_idx = sum(r.size for r in per_head)
                log.add("scp_index_exchange", me.rank, peer.rank,
                        8 * len(per_head) + index_width * n_idx)
        for (asker, owner), per_head in sorted(requests.items()):
            owner_dev = devices[owner]
            asker_dev = devices[asker]
            row_at = {row: i for i, row in enumerate(owner_dev.span_rows)}
            payload_rows = 0
            for hi, rows in enumerate(per_head):
                head = asker_dev.heads[hi]
                if rows.size and not all(int(r) in row_at for r in rows):
                    raise ProtocolError(
                        f"rank {asker} requested rows outside rank {owner}'s chunk"
                    )
                store = asker_dev.remote_kv.setdefault(int(head), {})
                local_hi = int(np.nonzero(owner_dev.heads == head)[0][0])
                for r in rows:
                    at = row_at[int(r)]
                    store[int(r)] = (
                        owner_dev.k[local_hi, at].copy(),
                        owner_dev.v[local_hi, at].copy(),
                    )
                payload_rows += rows.size
            d_dim = asker_dev.q.shape[2]
            log.add("scp_kv", owner, asker, 2 * payload_rows * d_dim * width)


def _device_attention(dev: SimDevice, index_sets) -> np.ndarray:
    """Sparse attention for the device's heads over its span queries."""
    h_r, span, d_dim = dev.q.shape
    out = np.empty((h_r, span, d_dim))
    row_at = {row: i for i, row in enumerate(dev.span_rows)}
    scale = np.sqrt(d_dim)
    for hi, head in enumerate(dev.heads):
        store = dev.remote_kv.get(int(head), {})
        for qi, gq in enumerate(dev.span_rows):
            sel = np.asarray(index_sets[head][gq], dtype=np.int64)
            if sel.size == 0:
                raise ValueError(f"query {gq} of head {head} has no selected keys")
            k_rows = np.empty((sel.size, d_dim))
            v_rows = np.empty((sel.size, d_dim))
            for si, key in enumerate(sel):
                key = int(key)
                if key in row_at:
                    k_rows[si] = dev.k[hi, row_at[key]]
                    v_rows[si] = dev.v[hi, row_at[key]]
                else:
                    try:
                        k_rows[si], v_rows[si] = store[key]
                    except KeyError:
                        raise ProtocolError(
                            f"head {head} query {gq}: key row {key} neither "
                            f"local nor gathered"
                        ) from None
            logits = dev.q[hi, qi] @ k_rows.T / scale
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
            out[hi, qi] = w @ v_rows
    return out


def run_hybrid_sparse_cp(devices, config: CPConfig, cluster: ClusterSpec,
                         index_sets, index_width: int = 4):
    """Execute the full hybrid pipeline; returns ([H, S, D] output, log).

    ``index_sets``: per head, one sorted global index array per query.
    The assembled output is defined for every (head, token).
    """
    n = len(devices)
    if n != cluster.n_devices or config.g_h * config.g_s != n:
        raise ValueError("device list inconsistent with config and cluster")
    h_total = devices[0].q.shape[0]
    if len(index_sets) != h_total:
        raise ValueError("need one index-set list per head")

    log = MessageLog()
    if config.g_h > 1:
        load_balance_hcp(devices, config, cluster, log)
    else:
        for dev in devices:
            dev.heads = np.arange(h_total)
            dev.span_rows = dev.chunk_rows
    if config.g_s > 1:
        selective_comm_scp(devices, index_sets, config, cluster, log, index_width)

    outputs = {dev.rank: _device_attention(dev, index_sets) for dev in devices}

    s_total = sum(d.chunk_rows.size for d in devices)
    d_dim = devices[0].q.shape[2]
    final = np.zeros((h_total, s_total, d_dim))
    width = cluster.elem_width
    if config.g_h > 1:
        for grp in sorted({d.group for d in devices}):
            members = _group_members(devices, grp)
            for src in members:
                out = outputs[src.rank]
                row_at = {row: i for i, row in enumerate(src.span_rows)}
                for dst in members:
                    rows = dst.chunk_rows
                    idx = np.array([row_at[r] for r in rows])
                    final[np.ix_(src.heads, rows)] = out[:, idx, :]
                    if src.rank != dst.rank:
                        log.add("output_redistribute", src.rank, dst.rank,
                                src.heads.size * rows.size * d_dim * width)
    else:
        for dev in devices:
            final[:, dev.chunk_rows, :] = outputs[dev.rank]
    return final, log


def measured_alpha(index_sets, heads, spans) -> AlphaMatrix:
    """Alpha over SCP spans for one position's heads and the given spans.

    ``spans`` is a per-group list of global row arrays (all equal sized).
    Matches what selective_comm_scp actually transfers, so scp_comm on
    this matrix reproduces the ledger bytes exactly.
    """
    g_s = len(spans)
    span_size = len(spans[0])
    counts = np.zeros((g_s, g_s), dtype=np.int64)
    span_sets = [set(np.asarray(sp).tolist()) for sp in spans]
    for head in heads:
        for i in range(g_s):
            needed = set()
            for gq in spans[i]:
                needed.update(int(x) for x in index_sets[head][gq])
            for j in range(g_s):
                if i == j:
                    continue
                counts[i, j] += len(needed & span_sets[j])
    values = counts / (len(heads) * span_size)
    np.fill_diagonal(values, 0.0)
    return AlphaMatrix(values=values, counts=counts,
                       chunk_rows=span_size, n_heads=len(heads))


def verify_equivalence(sim_output, reference, tol: float = 1e-6) -> dict:
    """Max-abs comparison report between simulated and reference outputs."""
    sim_output = np.asarray(sim_output)
    reference = np.asarray(reference)
    if sim_output.shape != reference.shape:
        return {"passed": False, "reason": "shape mismatch",
                "sim_shape": list(sim_output.shape),
                "ref_shape": list(reference.shape)}
    err = np.abs(sim_output - reference)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    return {
        "passed": bool(err.max() <= tol),
        "max_abs_error": float(err.max()),
        "worst_location": [int(x) for x in worst],
        "tol": float(tol),
    }
