"""Closed-form cost/memory models and the hybrid CP configuration solver.

Hybrid layout: with N = g_h * g_s devices, ranks factor into g_s
head-parallel (HCP) groups of g_h devices each. One head->position
assignment is shared by every HCP group, so the devices at the same
position across groups form an SCP group that holds the same heads over
different sequence spans of length S / g_s. The HCP exchange therefore
runs over a group span of S / g_s with g_h peers, and the selective KV
exchange over the full sequence with g_s peers.

Placement controls which dimension occupies consecutive ranks:
``hcp-first`` lays HCP groups on adjacent ranks (rank = g * g_h + p),
``scp-first`` lays SCP groups on adjacent ranks (rank = p * g_s + g).
A phase runs at intra-node bandwidth only if all of the device's phase
peers share its node.
"""

from dataclasses import dataclass, field

import numpy as np

HCP_FIRST = "hcp-first"
SCP_FIRST = "scp-first"
PLACEMENTS = (HCP_FIRST, SCP_FIRST)


class InfeasiblePlanError(Exception):
    """No (g_h, g_s, placement) satisfies the constraints."""

    def __init__(self, message, binding_constraint=None, detail=None):
        super().__init__(message)
        self.binding_constraint = binding_constraint
        self.detail = detail or {}


@dataclass(frozen=True)
class ClusterSpec:
    n_devices: int
    devices_per_node: int
    intra_bw: float          # bytes/s
    inter_bw: float          # bytes/s
    compute_rate: float      # score-value units/s
    memory_cap: float        # bytes per device
    elem_width: int = 2

    def __post_init__(self):
        if self.n_devices < 1 or self.devices_per_node < 1:
            raise ValueError("device counts must be positive")
        if self.n_devices % self.devices_per_node:
            raise ValueError("devices_per_node must divide n_devices")
        for name in ("intra_bw", "inter_bw", "compute_rate", "memory_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.elem_width < 1:
            raise ValueError("elem_width must be positive")

    def node_of(self, rank: int) -> int:
        return rank // self.devices_per_node

    @classmethod
    def from_json(cls, data: dict) -> "ClusterSpec":
        return cls(
            n_devices=int(data["n_devices"]),
            devices_per_node=int(data["devices_per_node"]),
            intra_bw=float(data["intra_bw"]),
            inter_bw=float(data["inter_bw"]),
            compute_rate=float(data["compute_rate"]),
            memory_cap=float(data["memory_cap"]),
            elem_width=int(data.get("elem_width", 2)),
        )


def head_loads(sparsities, s: int, d_k: int) -> np.ndarray:
    """Per-head compute burden: (1 - sparsity) * S^2 * d_k score-value units."""
    sp = np.asarray(sparsities, dtype=np.float64)
    if np.any((sp < 0) | (sp > 1)):
        raise ValueError("sparsities must lie in [0, 1]")
    return (1.0 - sp) * float(s) * float(s) * float(d_k)


@dataclass
class HcpPlan:
    """Head -> device assignment within one HCP group."""

    assignment: np.ndarray   # per head: device position in [0, n)
    device_loads: np.ndarray
    comp_hcp: float          # max device load
    optimal: bool

    def heads_of(self, position: int) -> np.ndarray:
        return np.nonzero(self.assignment == position)[0]

    def head_counts(self, n: int) -> np.ndarray:
        return np.bincount(self.assignment, minlength=n)


def _lpt_with_swaps(loads: np.ndarray, n: int):
    """LPT greedy plus pairwise move/swap refinement."""
    order = np.argsort(-loads, kind="stable")
    assignment = np.empty(loads.size, dtype=np.int64)
    bins = np.zeros(n)
    for head in order:
        target = int(np.argmin(bins))
        assignment[head] = target
        bins[target] += loads[head]

    improved = True
    while improved:
        improved = False
        hot = int(np.argmax(bins))
        hot_heads = np.nonzero(assignment == hot)[0]
        for head in hot_heads:
            for dest in range(n):
                if dest == hot:
                    continue
                if max(bins[hot] - loads[head], bins[dest] + loads[head]) < bins.max():
                    bins[hot] -= loads[head]
                    bins[dest] += loads[head]
                    assignment[head] = dest
                    improved = True
                    break
            if improved:
                break
        if improved:
            continue
        for ha in hot_heads:
            for hb in np.nonzero(assignment != hot)[0]:
                dest = assignment[hb]
                new_hot = bins[hot] - loads[ha] + loads[hb]
                new_dest = bins[dest] - loads[hb] + loads[ha]
                if max(new_hot, new_dest) < bins.max():
                    bins[hot], bins[dest] = new_hot, new_dest
                    assignment[ha], assignment[hb] = dest, hot
                    improved = True
                    break
            if improved:
                break
    return assignment, bins


def _branch_and_bound(loads: np.ndarray, n: int, upper: float, upper_assign: np.ndarray):
    """Exact min-max partition via DFS with the LPT solution as incumbent."""
    order = np.argsort(-loads, kind="stable")
    sorted_loads = loads[order]
    suffix = np.concatenate([np.cumsum(sorted_loads[::-1])[::-1], [0.0]])
    total = float(loads.sum())
    lower0 = max(total / n, float(sorted_loads[0]) if loads.size else 0.0)

    best = {"value": upper, "assign": upper_assign.copy()}
    bins = np.zeros(n)
    assign_sorted = np.empty(loads.size, dtype=np.int64)

    def dfs(i):
        if i == loads.size:
            value = bins.max()
            if value < best["value"]:
                best["value"] = value
                best["assign"] = assign_sorted.copy()
            return
        current_max = bins.max()
        # remaining work spread perfectly cannot beat this bound
        bound = max(current_max, (bins.sum() + suffix[i]) / n, lower0)
        if bound >= best["value"]:
            return
        seen = set()
        for dev in range(n):
            key = round(bins[dev], 12)
            if key in seen:  # identical bins are symmetric
                continue
            seen.add(key)
            if bins[dev] + sorted_loads[i] >= best["value"]:
                continue
            bins[dev] += sorted_loads[i]
            assign_sorted[i] = dev
            dfs(i + 1)
            bins[dev] -= sorted_loads[i]

    dfs(0)
    assignment = np.empty(loads.size, dtype=np.int64)
    assignment[order] = best["assign"]
    return assignment, best["value"]


def balance_heads(loads, n: int, *, exact_limit: int = 16) -> HcpPlan:
    """Assign heads to n devices minimising the max per-device burden.

    Exact branch-and-bound (seeded by LPT) for up to ``exact_limit``
    heads, LPT with pairwise move/swap refinement beyond; the plan's
    ``optimal`` flag records which path ran.
    """
    loads = np.asarray(loads, dtype=np.float64)
    if loads.ndim != 1 or loads.size < 1:
        raise ValueError("loads must be a nonempty 1D vector")
    if np.any(loads < 0):
        raise ValueError("loads must be nonnegative")
    if n < 1:
        raise ValueError("device count must be positive")

    assignment, bins = _lpt_with_swaps(loads, n)
    optimal = loads.size <= exact_limit
    if optimal and n > 1:
        assignment, _ = _branch_and_bound(loads, n, float(bins.max()) + 1e-12, assignment)
    device_loads = np.zeros(n)
    np.add.at(device_loads, assignment, loads)
    return HcpPlan(
        assignment=assignment,
        device_loads=device_loads,
        comp_hcp=float(device_loads.max()),
        optimal=optimal,
    )


def hcp_comm(h_total: int, h_i_r: int, s: int, d: int, n: int, elem_width: int) -> float:
    """Per-device HCP all-to-all bytes: three QKV tensors plus the output.

    Each term is the larger of bytes received (own heads from n-1 peers)
    and bytes sent (other positions' heads from the local chunk).
    """
    if not 0 <= h_i_r <= h_total:
        raise ValueError("h_i_r must lie in [0, h_total]")
    recv = h_i_r * (n - 1) / n
    send = (h_total - h_i_r) / n
    return elem_width * (3 * s * d * max(recv, send) + s * d * max(send, recv))


def hcp_mem(h_i_r: int, s: int, d: int, elem_width: int) -> float:
    """Resident QKV plus output bytes for the assigned heads: 4*S*D*H_i^r."""
    return elem_width * 4 * s * d * h_i_r


@dataclass
class AlphaMatrix:
    """alpha[i][j]: fraction of device j's KV chunk needed by device i.

    ``counts`` (when present) holds the exact per-pair needed-row counts
    summed over heads, from which values = counts / (n_heads * chunk_rows).
    """

    values: np.ndarray
    counts: np.ndarray | None = None
    chunk_rows: int | None = None
    n_heads: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("alpha must be square")
        off_diag = self.values[~np.eye(self.values.shape[0], dtype=bool)]
        if off_diag.size and (off_diag.min() < 0 or off_diag.max() > 1):
            raise ValueError("alpha entries must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def scp_comm(alpha: AlphaMatrix, i: int, h: int, d: int, s: int, n: int,
             elem_width: int) -> float:
    """Selective KV gathering bytes for device i.

    2*H*D*(S/N) * max(sum_j alpha_i^j, sum_j alpha_j^i): the larger of the
    K+V rows received for i's queries and the local rows served to peers.
    """
    a = alpha.values
    recv = sum(a[i, j] for j in range(n) if j != i)
    send = sum(a[j, i] for j in range(n) if j != i)
    return elem_width * 2 * h * d * s / n * max(recv, send)


def scp_mem(alpha: AlphaMatrix, i: int, h: int, d: int, s: int, n: int,
            elem_width: int) -> float:
    """Extra resident bytes for gathered non-local critical KV rows."""
    a = alpha.values
    return elem_width * 2 * h * d * sum(a[i, j] * s / n for j in range(n) if j != i)


def alpha_from_indices(index_sets, n: int, s: int) -> AlphaMatrix:
    """Derive alpha from global critical index sets.

    ``index_sets`` is a per-head list of per-query index arrays over the
    global key range [0, S). Query q belongs to chunk q // (S/n); entry
    (i, j) counts the distinct rows of chunk j needed by chunk i's
    queries, averaged over heads and normalised by the chunk size.
    """
    if s % n:
        raise ValueError("sequence length must divide evenly across devices")
    chunk = s // n
    n_heads = len(index_sets)
    counts = np.zeros((n, n), dtype=np.int64)
    for per_query in index_sets:
        if len(per_query) != s:
            raise ValueError("each head needs one index list per query")
        for i in range(n):
            needed = set()
            for q in range(i * chunk, (i + 1) * chunk):
                idx = np.asarray(per_query[q])
                if idx.size and (idx.min() < 0 or idx.max() >= s):
                    raise ValueError("critical index outside [0, S)")
                needed.update(idx.tolist())
            for j in range(n):
                if j == i:
                    continue
                lo, hi = j * chunk, (j + 1) * chunk
                counts[i, j] += sum(1 for x in needed if lo <= x < hi)
    values = counts / (n_heads * chunk)
    np.fill_diagonal(values, 0.0)
    return AlphaMatrix(values=values, counts=counts, chunk_rows=chunk, n_heads=n_heads)


def coarsen_alpha(alpha: AlphaMatrix, group_of: np.ndarray, n_groups: int) -> AlphaMatrix:
    """Mean-pool a fine-chunk alpha onto merged spans (planning approximation)."""
    values = np.zeros((n_groups, n_groups))
    for gi in range(n_groups):
        fine_i = np.nonzero(group_of == gi)[0]
        for gj in range(n_groups):
            if gi == gj:
                continue
            fine_j = np.nonzero(group_of == gj)[0]
            values[gi, gj] = float(np.mean(alpha.values[np.ix_(fine_i, fine_j)]))
    return AlphaMatrix(values=values)


def rank_layout(n: int, g_h: int, g_s: int, placement: str):
    """(position, group) per rank for a placement; see module docstring."""
    if placement == HCP_FIRST:
        return [(rank % g_h, rank // g_h) for rank in range(n)]
    if placement == SCP_FIRST:
        return [(rank // g_s, rank % g_s) for rank in range(n)]
    raise ValueError(f"unknown placement {placement!r}")


def _phase_bandwidth(cluster: ClusterSpec, rank: int, peers) -> float:
    same_node = all(cluster.node_of(p) == cluster.node_of(rank) for p in peers)
    return cluster.intra_bw if same_node else cluster.inter_bw


@dataclass
class ConfigEval:
    """Cost evaluation of one (g_h, g_s, placement) candidate."""

    g_h: int
    g_s: int
    placement: str
    objective: float
    feasible: bool
    per_device_comp: list
    per_device_comm: list
    per_device_mem: list
    binding_constraint: str | None = None


@dataclass
class CPConfig:
    g_h: int
    g_s: int
    placement: str
    plan: HcpPlan
    objective: float
    per_device_comp: list
    per_device_comm: list
    per_device_mem: list
    evaluations: list = field(default_factory=list)
    alpha_iteration: int | None = None
    alpha_stale: bool = False

    def to_json(self) -> dict:
        return {
            "g_h": self.g_h,
            "g_s": self.g_s,
            "placement": self.placement,
            "head_assignment": self.plan.assignment.tolist(),
            "comp_hcp": self.plan.comp_hcp,
            "plan_optimal": self.plan.optimal,
            "objective": self.objective,
            "per_device_comp": self.per_device_comp,
            "per_device_comm": self.per_device_comm,
            "per_device_mem": self.per_device_mem,
            "alpha_iteration": self.alpha_iteration,
            "alpha_stale": self.alpha_stale,
        }


def evaluate_config(
    loads,
    alpha_fine: AlphaMatrix,
    cluster: ClusterSpec,
    s: int,
    d: int,
    g_h: int,
    g_s: int,
    placement: str,
    plan: HcpPlan,
) -> ConfigEval:
    """Predicted per-device times and memory for one hybrid candidate."""
    n = cluster.n_devices
    h_total = len(loads)
    layout = rank_layout(n, g_h, g_s, placement)
    s_span = s // g_s
    head_counts = plan.head_counts(g_h)

    # fine chunks (one per rank in sequence order) merge into SCP spans
    alpha_span = None
    if g_s > 1:
        alpha_span = (
            coarsen_alpha(alpha_fine, _span_groups(layout, n), g_s)
            if alpha_fine.n != g_s else alpha_fine
        )

    comp, comm, mem = [], [], []
    feasible = True
    binding = None
    for rank, (pos, grp) in enumerate(layout):
        h_i_r = int(head_counts[pos])
        t_comp = plan.device_loads[pos] / g_s / cluster.compute_rate

        hcp_peers = [r for r, (p2, g2) in enumerate(layout) if g2 == grp and r != rank]
        scp_peers = [r for r, (p2, g2) in enumerate(layout) if p2 == pos and r != rank]

        hcp_bytes = 0.0
        if g_h > 1:
            hcp_bytes = hcp_comm(h_total, h_i_r, s_span, d, g_h, cluster.elem_width)
        scp_bytes = 0.0
        scp_extra_mem = 0.0
        if g_s > 1:
            scp_bytes = scp_comm(alpha_span, grp, h_i_r, d, s, g_s, cluster.elem_width)
            scp_extra_mem = scp_mem(alpha_span, grp, h_i_r, d, s, g_s, cluster.elem_width)

        t_comm = 0.0
        if hcp_bytes:
            t_comm += hcp_bytes / _phase_bandwidth(cluster, rank, hcp_peers)
        if scp_bytes:
            t_comm += scp_bytes / _phase_bandwidth(cluster, rank, scp_peers)

        mem_total = hcp_mem(h_i_r, s_span, d, cluster.elem_width) + scp_extra_mem
        if mem_total > cluster.memory_cap:
            feasible = False
            binding = "memory"
        comp.append(t_comp)
        comm.append(t_comm)
        mem.append(mem_total)

    objective = max(c + m for c, m in zip(comp, comm)) if comp else 0.0
    return ConfigEval(
        g_h=g_h, g_s=g_s, placement=placement, objective=objective,
        feasible=feasible, per_device_comp=comp, per_device_comm=comm,
        per_device_mem=mem, binding_constraint=binding,
    )


def _span_groups(layout, n) -> np.ndarray:
    """Map each fine chunk (rank order) to its SCP span (HCP group id)."""
    return np.array([grp for (_, grp) in layout], dtype=np.int64)


def solve_hybrid(
    loads,
    alpha: AlphaMatrix,
    cluster: ClusterSpec,
    s: int,
    d: int,
    *,
    alpha_iteration: int | None = None,
    profile_iteration: int | None = None,
) -> CPConfig:
    """Enumerate (g_h, g_s, placement), minimise max per-device time.

    ``alpha`` is given at the finest granularity (one chunk per rank) and
    mean-pooled onto SCP spans for g_s < N. Raises InfeasiblePlanError
    when every candidate violates the memory cap.
    """
    loads = np.asarray(loads, dtype=np.float64)
    n = cluster.n_devices
    h_total = loads.size
    if alpha.n != n:
        raise ValueError(f"alpha must be {n}x{n} (one chunk per rank)")
    if s % n:
        raise ValueError("sequence length must divide the device count")

    evaluations = []
    best = None
    best_plan = None
    for g_h in range(1, min(n, h_total) + 1):
        if n % g_h:
            continue
        g_s = n // g_h
        plan = balance_heads(loads, g_h)
        for placement in PLACEMENTS:
            ev = evaluate_config(loads, alpha, cluster, s, d, g_h, g_s, placement, plan)
            evaluations.append(ev)
            if not ev.feasible:
                continue
            if best is None or ev.objective < best.objective:
                best = ev
                best_plan = plan

    if best is None:
        raise InfeasiblePlanError(
            "no feasible hybrid CP configuration",
            binding_constraint="memory",
            detail={"evaluated": len(evaluations)},
        )
    return CPConfig(
        g_h=best.g_h, g_s=best.g_s, placement=best.placement, plan=best_plan,
        objective=best.objective, per_device_comp=best.per_device_comp,
        per_device_comm=best.per_device_comm, per_device_mem=best.per_device_mem,
        evaluations=evaluations,
        alpha_iteration=alpha_iteration,
        alpha_stale=(
            alpha_iteration is not None
            and profile_iteration is not None
            and alpha_iteration < profile_iteration
        ),
    )


def inter_node_traffic(config_gh, config_gs, placement, cluster: ClusterSpec,
                       h_counts, alpha_span: AlphaMatrix, s: int, d: int):
    """(hcp_bytes, scp_bytes) crossing node boundaries under a placement."""
    n = cluster.n_devices
    layout = rank_layout(n, config_gh, config_gs, placement)
    s_span = s // config_gs
    chunk = s_span // config_gh
    hcp_cross = 0.0
    scp_cross = 0.0
    for rank, (pos, grp) in enumerate(layout):
        for peer, (pos2, grp2) in enumerate(layout):
            if peer == rank or cluster.node_of(peer) == cluster.node_of(rank):
                continue
            if grp2 == grp:
                # QKV slices for the peer's heads plus the peer's output chunk
                hcp_cross += (
                    (3 * int(h_counts[pos2]) + int(h_counts[pos]))
                    * chunk * d * cluster.elem_width
                )
            if pos2 == pos and alpha_span.n == config_gs:
                scp_cross += (
                    2 * int(h_counts[pos]) * d * (s // config_gs)
                    * alpha_span.values[grp2, grp] * cluster.elem_width
                )
    return hcp_cross, scp_cross


def choose_placement(config: CPConfig, cluster: ClusterSpec, alpha_fine: AlphaMatrix,
                     s: int, d: int) -> str:
    """Placement whose dominant inter-node phase volume is smaller.

    Compares max(HCP bytes, SCP bytes) crossing node boundaries under each
    rank layout; ties go to hcp-first.
    """
    h_counts = config.plan.head_counts(config.g_h)
    results = {}
    for placement in PLACEMENTS:
        layout = rank_layout(cluster.n_devices, config.g_h, config.g_s, placement)
        alpha_span = (
            coarsen_alpha(alpha_fine, _span_groups(layout, cluster.n_devices), config.g_s)
            if alpha_fine.n != config.g_s else alpha_fine
        )
        hcp_cross, scp_cross = inter_node_traffic(
            config.g_h, config.g_s, placement, cluster, h_counts, alpha_span, s, d
        )
        results[placement] = max(hcp_cross, scp_cross)
    if results[SCP_FIRST] < results[HCP_FIRST]:
        return SCP_FIRST
    return HCP_FIRST
