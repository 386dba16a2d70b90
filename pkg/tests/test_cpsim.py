import numpy as np
import pytest

from dynsparse.attention import (
    CriticalIndexSet,
    attention_scores,
    critical_kv_oracle,
    full_attention,
    sparse_attention,
)
from dynsparse.cpmodel import (
    PLACEMENTS,
    AlphaMatrix,
    ClusterSpec,
    CPConfig,
    balance_heads,
    hcp_comm,
    head_loads,
    scp_comm,
)
from dynsparse.cpsim import (
    MessageLog,
    ProtocolError,
    make_devices,
    measured_alpha,
    run_hybrid_sparse_cp,
    verify_equivalence,
)


def build_case(seed, h, s, d, theta=0.9):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((h, s, d))
    k = rng.standard_normal((h, s, d))
    v = rng.standard_normal((h, s, d))
    sets = []
    for head in range(h):
        scores = attention_scores(q[head], k[head])
        sets.append(critical_kv_oracle(scores, theta).indices)
    return q, k, v, sets


def make_config(sets, s, d, g_h, g_s, placement):
    sparsities = [1.0 - np.mean([x.size for x in per]) / s for per in sets]
    plan = balance_heads(head_loads(sparsities, s, d), g_h)
    return CPConfig(g_h=g_h, g_s=g_s, placement=placement, plan=plan,
                    objective=0.0, per_device_comp=[], per_device_comm=[],
                    per_device_mem=[])


def reference_output(q, k, v, sets):
    return np.stack([
        sparse_attention(q[h], k[h], v[h], CriticalIndexSet(sets[h]))
        for h in range(q.shape[0])
    ])


def cluster_for(n, per_node=None):
    return ClusterSpec(n_devices=n, devices_per_node=per_node or n,
                       intra_bw=1e9, inter_bw=1e8, compute_rate=1e9,
                       memory_cap=1e12, elem_width=2)


class TestSingleDevice:
    def test_n1_equals_local_sparse(self):
        q, k, v, sets = build_case(0, h=2, s=32, d=4)
        cluster = cluster_for(1)
        config = make_config(sets, 32, 4, 1, 1, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        out, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        np.testing.assert_allclose(out, reference_output(q, k, v, sets), atol=1e-12)
        assert log.records == []


class TestFullIndexEquivalence:
    def test_all_indices_equals_full_attention(self):
        h, s, d = 4, 64, 8
        rng = np.random.default_rng(5)
        q = rng.standard_normal((h, s, d))
        k = rng.standard_normal((h, s, d))
        v = rng.standard_normal((h, s, d))
        sets = [[np.arange(s)] * s for _ in range(h)]
        cluster = cluster_for(4, per_node=2)
        config = make_config(sets, s, d, 2, 2, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        out, _ = run_hybrid_sparse_cp(devices, config, cluster, sets)
        expected = np.stack([full_attention(q[i], k[i], v[i]) for i in range(h)])
        np.testing.assert_allclose(out, expected, atol=1e-6)


class TestGridEquivalence:
    @pytest.mark.parametrize("n,g_h,g_s", [
        (2, 1, 2), (2, 2, 1), (4, 2, 2), (4, 4, 1), (4, 1, 4), (8, 4, 2),
    ])
    @pytest.mark.parametrize("placement", PLACEMENTS)
    def test_output_matches_single_device(self, n, g_h, g_s, placement):
        q, k, v, sets = build_case(42, h=4, s=64, d=8)
        cluster = cluster_for(n, per_node=max(1, n // 2))
        config = make_config(sets, 64, 8, g_h, g_s, placement)
        devices = make_devices(q, k, v, cluster, config)
        out, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        ref = reference_output(q, k, v, sets)
        report = verify_equivalence(out, ref, tol=1e-6)
        assert report["passed"], report


class TestLedger:
    def test_byte_conservation_per_phase(self):
        q, k, v, sets = build_case(7, h=4, s=64, d=8)
        cluster = cluster_for(4, per_node=2)
        config = make_config(sets, 64, 8, 2, 2, "scp-first")
        devices = make_devices(q, k, v, cluster, config)
        _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        for phase in ("hcp_fwd", "scp_index_exchange", "scp_kv",
                      "output_redistribute"):
            sent = sum(log.sent_by(r, phase) for r in range(4))
            received = sum(log.received_by(r, phase) for r in range(4))
            assert sent == received == log.phase_total(phase)

    def test_hcp_bytes_match_formula(self):
        q, k, v, sets = build_case(11, h=4, s=64, d=8)
        s, d, g_h, g_s = 64, 8, 4, 1
        cluster = cluster_for(4)
        config = make_config(sets, s, d, g_h, g_s, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        counts = config.plan.head_counts(g_h)
        for dev in devices:
            expect = hcp_comm(4, int(counts[dev.position]), s // g_s, d, g_h,
                              cluster.elem_width)
            got = max(log.sent_by(dev.rank, "hcp_fwd"),
                      log.received_by(dev.rank, "hcp_fwd"))
            got += max(log.sent_by(dev.rank, "output_redistribute"),
                       log.received_by(dev.rank, "output_redistribute"))
            assert got == expect

    def test_scp_kv_bytes_match_formula_exactly(self):
        q, k, v, sets = build_case(13, h=4, s=64, d=8, theta=0.8)
        s, d, g_h, g_s = 64, 8, 2, 2
        cluster = cluster_for(4, per_node=2)
        config = make_config(sets, s, d, g_h, g_s, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        for dev in devices:
            spans = [None] * g_s
            for other in devices:
                if other.position == dev.position:
                    spans[other.group] = other.span_rows
            alpha = measured_alpha(sets, dev.heads, spans)
            expect = scp_comm(alpha, dev.group, dev.heads.size, d, s, g_s,
                              cluster.elem_width)
            got = max(log.sent_by(dev.rank, "scp_kv"),
                      log.received_by(dev.rank, "scp_kv"))
            assert got == expect

    def test_all_local_sets_send_no_kv(self):
        h, s, d = 2, 32, 4
        rng = np.random.default_rng(3)
        q = rng.standard_normal((h, s, d))
        k = rng.standard_normal((h, s, d))
        v = rng.standard_normal((h, s, d))
        # each query keeps only itself: never needs a remote row
        sets = [[np.array([i]) for i in range(s)] for _ in range(h)]
        cluster = cluster_for(2)
        config = make_config(sets, s, d, 1, 2, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        assert log.phase_total("scp_kv") == 0

    def test_full_remote_need_is_full_gather_volume(self):
        h, s, d = 2, 32, 4
        rng = np.random.default_rng(4)
        q = rng.standard_normal((h, s, d))
        k = rng.standard_normal((h, s, d))
        v = rng.standard_normal((h, s, d))
        sets = [[np.arange(s)] * s for _ in range(h)]
        n = 2
        cluster = cluster_for(n)
        config = make_config(sets, s, d, 1, n, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
        expect = 2 * h * d * s * (n - 1) / n * cluster.elem_width
        for rank in range(n):
            assert log.received_by(rank, "scp_kv") == expect

    def test_determinism_bit_identical_ledgers(self):
        q, k, v, sets = build_case(21, h=4, s=64, d=8)
        cluster = cluster_for(4, per_node=2)
        config = make_config(sets, 64, 8, 2, 2, "hcp-first")
        logs = []
        for _ in range(2):
            devices = make_devices(q, k, v, cluster, config)
            _, log = run_hybrid_sparse_cp(devices, config, cluster, sets)
            logs.append(log.to_json())
        assert logs[0] == logs[1]


class TestValidation:
    def test_inconsistent_device_count_rejected(self):
        q, k, v, sets = build_case(0, h=2, s=32, d=4)
        cluster = cluster_for(2)
        config = make_config(sets, 32, 4, 2, 1, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        bad_cluster = cluster_for(4)
        with pytest.raises(ValueError):
            run_hybrid_sparse_cp(devices, config, bad_cluster, sets)

    def test_plan_head_mismatch_rejected(self):
        q, k, v, sets = build_case(0, h=2, s=32, d=4)
        cluster = cluster_for(2)
        config = make_config(sets, 32, 4, 2, 1, "hcp-first")
        config.plan.assignment = np.array([0])  # covers one head, not two
        with pytest.raises(ValueError):
            make_devices(q, k, v, cluster, config)

    def test_uneven_sequence_rejected(self):
        q, k, v, sets = build_case(0, h=2, s=30, d=4)
        cluster = cluster_for(4)
        config = make_config(sets, 30, 4, 2, 2, "hcp-first")
        with pytest.raises(ValueError):
            make_devices(q, k, v, cluster, config)

    def test_missing_key_row_is_protocol_error(self):
        # force an index outside every span and the gathered store
        h, s, d = 1, 8, 2
        rng = np.random.default_rng(1)
        q = rng.standard_normal((h, s, d))
        k = rng.standard_normal((h, s, d))
        v = rng.standard_normal((h, s, d))
        sets = [[np.array([0]) for _ in range(s)]]
        cluster = cluster_for(2)
        config = make_config(sets, s, d, 1, 2, "hcp-first")
        devices = make_devices(q, k, v, cluster, config)
        # sabotage after the exchange: rank 1 suddenly needs row 1 it never asked for
        from dynsparse import cpsim

        log = MessageLog()
        for dev in devices:
            dev.heads = np.arange(h)
            dev.span_rows = dev.chunk_rows
        cpsim.selective_comm_scp(devices, sets, config, cluster, log)
        sets_bad = [[np.array([1]) for _ in range(s)]]
        with pytest.raises(ProtocolError):
            cpsim._device_attention(devices[1], sets_bad)


class TestVerifyEquivalence:
    def test_identical_passes(self, rng):
        x = rng.standard_normal((2, 8, 4))
        assert verify_equivalence(x, x.copy())["passed"]

    def test_perturbation_fails_with_location(self, rng):
        x = rng.standard_normal((2, 8, 4))
        y = x.copy()
        y[1, 3, 2] += 1e-3
        report = verify_equivalence(y, x, tol=1e-6)
        assert not report["passed"]
        assert report["worst_location"] == [1, 3, 2]

    def test_shape_mismatch(self, rng):
        report = verify_equivalence(rng.standard_normal((2, 2)),
                                    rng.standard_normal((3, 2)))
        assert not report["passed"]
        assert report["reason"] == "shape mismatch"
