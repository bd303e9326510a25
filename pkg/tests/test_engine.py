"""Engine tests: restricted-softmax consistency against sub-cache oracles,
sink+window masks, sparsity accounting, and the full decode loop."""

import numpy as np
import pytest
from test_workload import SMALL_SPEC, small_geometry

from headsparse.calibration import partition_heads
from headsparse.engine import (
    DecodeTrace,
    attention_mass_report,
    compute_sparsity,
    local_active_indices,
    local_head_decode,
    memory_sparsity,
    prefill,
    restricted_attention,
    retrieval_head_decode,
    run_workload,
    sparsity_report,
)
from headsparse.errors import ArgumentError
from headsparse.indexer import init_projector
from headsparse.rope import RopeParams
from headsparse.workload import (
    KVCacheHead,
    dense_attention,
    gen_synthetic_workload,
    qhead_to_kvhead,
)


def random_cache(rng, n, d=32):
    cache = KVCacheHead(RopeParams(d), capacity=n)
    cache.extend(rng.normal(size=(n, d)), rng.normal(size=(n, d)), np.arange(n))
    return cache


def sub_cache(cache, active):
    """Rebuild a cache containing only the active tokens, original positions."""
    sub = KVCacheHead(cache.rope, capacity=max(active.size, 1))
    sub.extend(cache.keys_pre[active], cache.values[active], cache.positions[active])
    return sub


def small_partition(n_q=8, ratio=0.25, planted=(1, 6)):
    scores = [1.0 if h in planted else 0.0 for h in range(n_q)]
    return partition_heads(scores, ratio)


SMALL_GEO = small_geometry()
SMALL_WORKLOAD = gen_synthetic_workload(SMALL_SPEC, seed=11, geometry=SMALL_GEO)


def small_projectors(partition, geometry, seed=0):
    return {
        (layer, h): init_projector(geometry.low_dim, geometry.head_dim, seed + 31 * h)
        for layer in range(geometry.n_layers)
        for h in partition.retrieval_set
    }


class TestLocalMask:
    def test_hand_example(self):
        np.testing.assert_array_equal(
            local_active_indices(10, window=2, n_sinks=4), [0, 1, 2, 3, 8, 9]
        )

    def test_short_prefix_covers_all(self):
        np.testing.assert_array_equal(
            local_active_indices(5, window=2, n_sinks=4), np.arange(5)
        )

    def test_exact_boundary(self):
        # tail start == n_sinks: contiguous, no gap and no overlap
        np.testing.assert_array_equal(
            local_active_indices(6, window=2, n_sinks=4), np.arange(6)
        )

    def test_self_only(self):
        np.testing.assert_array_equal(local_active_indices(7, 1, 0), [6])

    def test_rejects_empty(self):
        with pytest.raises(ArgumentError):
            local_active_indices(0, 2, 2)


class TestLocalDecode:
    def test_covered_prefix_equals_dense(self):
        rng = np.random.default_rng(0)
        cache = random_cache(rng, 7)
        q = rng.normal(size=32)
        out, active = local_head_decode(q, 6, cache, window=4, n_sinks=4)
        assert active.size == 7
        np.testing.assert_allclose(out, dense_attention(q, 6, cache).output, atol=1e-5)

    def test_self_only_returns_own_value(self):
        rng = np.random.default_rng(1)
        cache = random_cache(rng, 12)
        out, active = local_head_decode(rng.normal(size=32), 11, cache, 1, 0)
        np.testing.assert_array_equal(active, [11])
        np.testing.assert_allclose(out, cache.values64[11], atol=1e-12)

    def test_matches_sub_cache_oracle(self):
        rng = np.random.default_rng(2)
        cache = random_cache(rng, 100)
        q = rng.normal(size=32)
        out, active = local_head_decode(q, 99, cache, window=4, n_sinks=4)
        assert active.size == 8
        oracle = dense_attention(q, 99, sub_cache(cache, active))
        np.testing.assert_allclose(out, oracle.output, atol=1e-6)

    def test_partial_visibility(self):
        rng = np.random.default_rng(3)
        cache = random_cache(rng, 100)
        q = rng.normal(size=32)
        out, active = local_head_decode(q, 40, cache, window=8, n_sinks=2)
        assert active.max() == 40
        oracle = dense_attention(q, 40, sub_cache(cache, active))
        np.testing.assert_allclose(out, oracle.output, atol=1e-6)


class TestRetrievalDecode:
    def test_p_one_equals_dense(self):
        rng = np.random.default_rng(4)
        cache = random_cache(rng, 300)
        proj = init_projector(8, 32, seed=0)
        q = rng.normal(size=32)
        out, trace = retrieval_head_decode(q, 299, cache, proj, p=1.0)
        assert trace.tokens_selected == 300
        np.testing.assert_allclose(out, dense_attention(q, 299, cache).output, atol=1e-5)

    def test_single_token_cache(self):
        rng = np.random.default_rng(5)
        cache = random_cache(rng, 1)
        out, trace = retrieval_head_decode(
            rng.normal(size=32), 0, cache, init_projector(8, 32, 0), p=0.9
        )
        np.testing.assert_allclose(out, cache.values64[0], atol=1e-12)
        assert trace.tokens_selected == 1

    @pytest.mark.parametrize("mode", ["exact", "histogram"])
    def test_restricted_softmax_oracle_4k(self, mode):
        rng = np.random.default_rng(6)
        cache = random_cache(rng, 4096)
        proj = init_projector(8, 32, seed=1)
        q = rng.normal(size=32)
        out, trace = retrieval_head_decode(q, 4095, cache, proj, p=0.9, mode=mode)
        assert 0 < trace.tokens_selected < 4096
        assert trace.covered_projected_mass >= 0.9
        oracle = dense_attention(q, 4095, sub_cache(cache, trace.active_set))
        np.testing.assert_allclose(out, oracle.output, atol=1e-6)

    def test_projected_cache_path_agrees(self):
        from headsparse.indexer import ProjectedKeyCache

        rng = np.random.default_rng(7)
        cache = random_cache(rng, 500)
        proj = init_projector(8, 32, seed=2)
        q = rng.normal(size=32)
        out_a, tr_a = retrieval_head_decode(q, 499, cache, proj, p=0.9)
        pkc = ProjectedKeyCache(proj)
        out_b, tr_b = retrieval_head_decode(q, 499, cache, proj, p=0.9, pkc=pkc)
        np.testing.assert_array_equal(tr_a.active_set, tr_b.active_set)
        np.testing.assert_allclose(out_a, out_b, atol=1e-12)

    def test_unknown_mode(self):
        rng = np.random.default_rng(8)
        cache = random_cache(rng, 10)
        with pytest.raises(ArgumentError):
            retrieval_head_decode(
                rng.normal(size=32), 9, cache, init_projector(4, 32, 0), 0.9, "sorted"
            )


class TestPrefill:
    def test_retrieval_rows_match_dense(self):
        part = small_partition()
        res = prefill(SMALL_WORKLOAD, SMALL_GEO, [part], n_tokens=160)
        h = part.retrieval_set[0]
        cache = res.caches[(0, qhead_to_kvhead(SMALL_GEO, h))]
        for t in (0, 3, 57, 159):
            oracle = dense_attention(
                SMALL_WORKLOAD.queries[0, h, t], t, cache, SMALL_GEO.scale
            )
            np.testing.assert_allclose(res.outputs[0, h, t], oracle.output, atol=1e-5)

    def test_local_rows_match_masked_oracle(self):
        part = small_partition()
        res = prefill(SMALL_WORKLOAD, SMALL_GEO, [part], n_tokens=300)
        h = part.local_set[0]
        cache = res.caches[(0, qhead_to_kvhead(SMALL_GEO, h))]
        for t in (0, 150, 299):
            active = local_active_indices(t + 1, SMALL_GEO.window, SMALL_GEO.n_sinks)
            expect = restricted_attention(
                SMALL_WORKLOAD.queries[0, h, t], t, cache, active, SMALL_GEO.scale
            )
            np.testing.assert_allclose(res.outputs[0, h, t], expect, atol=1e-5)

    def test_short_sequence_local_equals_dense(self):
        # window 192 + 4 sinks covers a 100-token prefix entirely
        part = small_partition()
        res = prefill(SMALL_WORKLOAD, SMALL_GEO, [part], n_tokens=100)
        h = part.local_set[0]
        cache = res.caches[(0, qhead_to_kvhead(SMALL_GEO, h))]
        for t in (10, 99):
            oracle = dense_attention(
                SMALL_WORKLOAD.queries[0, h, t], t, cache, SMALL_GEO.scale
            )
            np.testing.assert_allclose(res.outputs[0, h, t], oracle.output, atol=1e-5)

    def test_cache_only_mode(self):
        res = prefill(SMALL_WORKLOAD, SMALL_GEO, [small_partition()],
                      n_tokens=64, compute_outputs=False)
        assert res.outputs is None
        assert len(res.caches[(0, 0)]) == 64

    def test_partition_count_checked(self):
        with pytest.raises(ArgumentError):
            prefill(SMALL_WORKLOAD, SMALL_GEO, [], n_tokens=32)


def make_trace(layer, head, position, active, role="retrieval"):
    active = np.asarray(active)
    return DecodeTrace(
        layer=layer, q_head=head, position=position, role=role,
        tokens_selected=active.size, covered_projected_mass=1.0,
        output=np.zeros(1), active_set=active,
    )


class TestSparsityMetrics:
    def test_attend_everything(self):
        traces = [make_trace(0, h, 9, np.arange(10)) for h in range(4)]
        assert compute_sparsity(traces) == 0.0

    def test_hundred_of_thousand(self):
        traces = [make_trace(0, h, 999, np.arange(100)) for h in range(4)]
        assert compute_sparsity(traces, {999: 1000}) == pytest.approx(0.9)

    def test_weighted_mean(self):
        full = [make_trace(0, 0, 999, np.arange(1000))]
        solo = [make_trace(0, 1, 999, np.arange(1))]
        got = compute_sparsity(full + solo, {999: 1000})
        assert got == pytest.approx(1 - (0.5 * 1.0 + 0.5 * 0.001))
        assert got == pytest.approx(0.4995, abs=1e-4)

    def test_memory_one_to_one_equals_compute(self):
        traces = [make_trace(0, h, 999, np.arange(h, h + 100)) for h in range(3)]
        vis = {999: 1000}
        assert memory_sparsity(traces, lambda h: h, vis) == pytest.approx(
            compute_sparsity(traces, vis)
        )

    def test_disjoint_union(self):
        a = make_trace(0, 0, 999, np.arange(100))
        b = make_trace(0, 1, 999, np.arange(500, 600))
        got = memory_sparsity([a, b], lambda h: 0, {999: 1000})
        assert got == pytest.approx(0.8)

    def test_identical_selection_idempotent(self):
        a = make_trace(0, 0, 999, np.arange(100))
        b = make_trace(0, 1, 999, np.arange(100))
        vis = {999: 1000}
        assert memory_sparsity([a, b], lambda h: 0, vis) == pytest.approx(
            compute_sparsity([a, b], vis)
        )

    def test_empty_traces_rejected(self):
        with pytest.raises(ArgumentError):
            compute_sparsity([])


class TestAttentionMassReport:
    def test_full_set_is_one(self):
        rng = np.random.default_rng(9)
        cache = random_cache(rng, 50)
        q = rng.normal(size=32)
        row = dense_attention(q, 49, cache)
        tr = make_trace(0, 0, 49, np.arange(50))
        assert attention_mass_report(tr, row) == pytest.approx(1.0)

    def test_subset_mass(self):
        rng = np.random.default_rng(10)
        cache = random_cache(rng, 50)
        row = dense_attention(rng.normal(size=32), 49, cache)
        tr = make_trace(0, 0, 49, np.array([0, 7, 49]))
        expect = row.weights[[0, 7, 49]].sum()
        assert attention_mass_report(tr, row) == pytest.approx(float(expect))

    def test_position_mismatch(self):
        rng = np.random.default_rng(11)
        cache = random_cache(rng, 50)
        row = dense_attention(rng.normal(size=32), 40, cache)
        with pytest.raises(ArgumentError):
            attention_mass_report(make_trace(0, 0, 49, [0]), row)


@pytest.fixture(scope="module")
def run():
    part = small_partition()
    projs = small_projectors(part, SMALL_GEO)
    return part, projs, run_workload(SMALL_WORKLOAD, SMALL_GEO, [part], projs, p=0.9)


class TestRunWorkload:
    def test_trace_shape(self, run):
        part, _, res = run
        decode_len = SMALL_WORKLOAD.seq_len - SMALL_WORKLOAD.prefill_len
        assert len(res.traces) == decode_len * SMALL_GEO.n_q_heads
        roles = {t.q_head: t.role for t in res.traces}
        for h in range(SMALL_GEO.n_q_heads):
            assert roles[h] == ("retrieval" if part.is_retrieval(h) else "local")

    def test_mass_floor(self, run):
        _, _, res = run
        for t in res.traces:
            assert t.covered_projected_mass >= 0.9 - 1e-12

    def test_restricted_consistency_sampled(self, run):
        _, _, res = run
        caches = res.caches
        for t in res.traces[:: max(len(res.traces) // 40, 1)]:
            cache = caches[(t.layer, qhead_to_kvhead(SMALL_GEO, t.q_head))]
            oracle = dense_attention(
                SMALL_WORKLOAD.queries[t.layer, t.q_head, t.position],
                t.position,
                sub_cache(cache, t.active_set),
                SMALL_GEO.scale,
            )
            np.testing.assert_allclose(t.output, oracle.output, atol=1e-6)

    def test_memory_not_above_compute(self, run):
        _, _, res = run
        assert res.report.memory_sparsity <= res.report.compute_sparsity + 1e-12

    def test_local_active_counts(self, run):
        part, _, res = run
        cap = SMALL_GEO.window + SMALL_GEO.n_sinks
        for t in res.traces:
            if t.role == "local":
                assert t.tokens_selected == min(cap, t.position + 1)

    def test_deterministic(self, run):
        part, projs, res = run
        res2 = run_workload(SMALL_WORKLOAD, SMALL_GEO, [part], projs, p=0.9)
        assert len(res.traces) == len(res2.traces)
        for a, b in zip(res.traces[::97], res2.traces[::97]):
            np.testing.assert_array_equal(a.active_set, b.active_set)
            np.testing.assert_array_equal(a.output, b.output)

    def test_histogram_mode(self):
        part = small_partition()
        projs = small_projectors(part, SMALL_GEO)
        res = run_workload(
            SMALL_WORKLOAD, SMALL_GEO, [part], projs, p=0.9, mode="histogram"
        )
        for t in res.traces:
            assert t.covered_projected_mass >= 0.9 - 1e-12
        assert res.report.memory_sparsity <= res.report.compute_sparsity + 1e-12

    def test_oracle_masses(self):
        part = small_partition()
        projs = small_projectors(part, SMALL_GEO)
        res = run_workload(
            SMALL_WORKLOAD, SMALL_GEO, [part], projs, p=0.9,
            oracle=True, trace_sample=8,
        )
        assert all(t.covered_true_mass is not None for t in res.traces)
        for t in res.traces:
            assert 0.0 <= t.covered_true_mass <= 1.0
            if t.role == "local":
                # sink+window rule was tuned to hold nearly all true mass
                assert t.covered_true_mass > 0.5

    def test_trace_sampling(self):
        part = small_partition()
        projs = small_projectors(part, SMALL_GEO)
        res = run_workload(
            SMALL_WORKLOAD, SMALL_GEO, [part], projs, trace_sample=4
        )
        decode_len = SMALL_WORKLOAD.seq_len - SMALL_WORKLOAD.prefill_len
        expect = ((decode_len + 3) // 4) * SMALL_GEO.n_q_heads
        assert len(res.traces) == expect

    def test_missing_projector(self):
        part = small_partition()
        with pytest.raises(ArgumentError):
            run_workload(SMALL_WORKLOAD, SMALL_GEO, [part], {})


class TestDenseDegeneration:
    def test_full_ratio_full_p(self):
        part = partition_heads([1.0] * SMALL_GEO.n_q_heads, 1.0)
        assert len(part.local_set) == 0
        projs = small_projectors(part, SMALL_GEO)
        res = run_workload(
            SMALL_WORKLOAD, SMALL_GEO, [part], projs, p=1.0, trace_sample=4
        )
        for t in res.traces:
            cache = res.caches[(t.layer, qhead_to_kvhead(SMALL_GEO, t.q_head))]
            assert t.tokens_selected == t.position + 1
            oracle = dense_attention(
                SMALL_WORKLOAD.queries[t.layer, t.q_head, t.position],
                t.position, cache, SMALL_GEO.scale,
            )
            np.testing.assert_allclose(t.output, oracle.output, atol=1e-5)
        assert res.report.compute_sparsity == pytest.approx(0.0, abs=1e-12)


class TestSparsityReportAssembly:
    def test_per_head_means(self):
        traces = [
            make_trace(0, 0, 9, np.arange(4)),
            make_trace(0, 0, 10, np.arange(6)),
            make_trace(0, 1, 9, np.arange(10)),
        ]
        rep = sparsity_report(traces, small_geometry(), {9: 10, 10: 11})
        assert rep.per_head_active[0, 0] == pytest.approx(5.0)
        assert rep.per_head_active[0, 1] == pytest.approx(10.0)
