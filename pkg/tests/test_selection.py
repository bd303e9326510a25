"""Selection tests: exact top-p / top-k, block stats, the histogram
threshold path, and split merging."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsparse.errors import ArgumentError
from headsparse.numerics import LsePair, lse_reduce, softmax
from headsparse.selection import (
    BIN_WIDTH,
    HIST_RANGE,
    N_BINS,
    BlockStats,
    SelectionResult,
    block_partition_stats,
    block_top_p_exact,
    build_histogram,
    histogram_threshold,
    merged_lse,
    split_merge,
    top_k_static,
    top_p_exact,
)

LN5, LN3, LN2 = math.log(5), math.log(3), math.log(2)
THREE_SCORES = np.array([LN5, LN3, LN2])  # softmax 0.5 / 0.3 / 0.2


class TestTopPExact:
    def test_hand_case_p_half(self):
        res = top_p_exact(THREE_SCORES, 0.5)
        assert res.active_set.tolist() == [0]
        assert res.covered_mass == pytest.approx(0.5, abs=1e-12)

    def test_hand_case_p_085(self):
        # prefix masses 0.5, 0.8: 0.8 < 0.85 forces the full set.
        res = top_p_exact(THREE_SCORES, 0.85)
        assert res.active_set.tolist() == [0, 1, 2]

    def test_p_one_takes_all(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=40)
        res = top_p_exact(s, 1.0)
        assert res.active_set.tolist() == list(range(40))
        assert res.covered_mass == pytest.approx(1.0, abs=1e-9)

    def test_ties_toward_lower_index(self):
        res = top_p_exact(np.zeros(4), 0.5)
        assert res.active_set.tolist() == [0, 1]

    def test_minimality(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            s = rng.normal(size=50) * 3
            p = rng.uniform(0.2, 0.99)
            res = top_p_exact(s, p)
            assert res.covered_mass >= p
            probs = softmax(s)
            least = res.active_set[np.argmin(probs[res.active_set])]
            assert res.covered_mass - probs[least] < p

    def test_bad_p(self):
        for p in (0.0, -0.1, 1.01):
            with pytest.raises(ArgumentError):
                top_p_exact(THREE_SCORES, p)

    def test_shift_does_not_change_selection(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=30)
        a = top_p_exact(s, 0.9).active_set
        b = top_p_exact(s + 123.0, 0.9).active_set
        np.testing.assert_array_equal(a, b)


class TestTopKStatic:
    def test_budget_saturation(self):
        res = top_k_static(THREE_SCORES, 10)
        assert res.active_set.tolist() == [0, 1, 2]
        assert res.covered_mass == pytest.approx(1.0, abs=1e-12)

    def test_hand_case_k2(self):
        res = top_k_static(THREE_SCORES, 2)
        assert res.active_set.tolist() == [0, 1]
        assert res.covered_mass == pytest.approx(0.8, abs=1e-12)

    def test_argmax(self):
        res = top_k_static(np.array([5.0, 4.0, 3.0]), 1)
        assert res.active_set.tolist() == [0]

    def test_k_bound(self):
        with pytest.raises(ArgumentError):
            top_k_static(THREE_SCORES, 0)

    def test_mass_monotone_in_k(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = rng.normal(size=64) * 2
            masses = [top_k_static(s, k).covered_mass for k in range(1, 65)]
            assert all(b >= a - 1e-12 for a, b in zip(masses, masses[1:]))


class TestBlockPartition:
    def test_single_block(self):
        rng = np.random.default_rng(4)
        s = rng.normal(size=64)
        blocks = block_partition_stats(s, 64)
        assert len(blocks) == 1
        assert blocks[0].length == 64
        assert blocks[0].lse == lse_reduce(s)

    def test_130_tokens_block_64(self):
        blocks = block_partition_stats(np.zeros(130), 64)
        assert [b.length for b in blocks] == [64, 64, 2]
        assert [b.start for b in blocks] == [0, 64, 128]
        assert [b.block_index for b in blocks] == [0, 1, 2]

    def test_merge_matches_whole(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=300) * 5
        blocks = block_partition_stats(s, 64)
        whole = lse_reduce(s)
        merged = merged_lse(blocks)
        assert merged.m == whole.m
        assert merged.l == pytest.approx(whole.l, rel=1e-10)

    def test_start_offsets(self):
        blocks = block_partition_stats(np.zeros(10), 4, start=100)
        assert [b.start for b in blocks] == [100, 104, 108]

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            block_partition_stats(np.array([]), 64)

    def test_invalid_block_stats(self):
        with pytest.raises(ArgumentError):
            BlockStats(0, 0, 0, LsePair(0.0, 1.0))
        with pytest.raises(ArgumentError):
            BlockStats(0, 0, 4, LsePair(0.0, 0.5))


def hist_mass(blocks, mask):
    m_star = max(b.lse.m for b in blocks)
    masses = [b.lse.l * math.exp(b.lse.m - m_star) for b in blocks]
    total = math.fsum(masses)
    return math.fsum(m for m, keep in zip(masses, mask) if keep) / total


class TestHistogramThreshold:
    def test_single_block(self):
        blocks = block_partition_stats(np.zeros(10), 64)
        res = histogram_threshold(blocks, 0.9)
        assert res.block_mask.tolist() == [True]
        assert res.covered_mass == pytest.approx(1.0)
        assert res.active_set.tolist() == list(range(10))

    def test_two_block_hand_case(self):
        # Masses 19 and e * e^{-1} = 1: fractions 0.95 / 0.05, with block
        # maxima 1.0 apart = 8 bins.  p = 0.9 keeps only the heavy block.
        blocks = [
            BlockStats(0, 0, 64, LsePair(0.0, 19.0)),
            BlockStats(1, 64, 64, LsePair(-1.0, math.e)),
        ]
        res = histogram_threshold(blocks, 0.9)
        assert res.block_mask.tolist() == [True, False]
        assert res.covered_mass == pytest.approx(0.95, abs=1e-12)
        assert res.threshold_bin == N_BINS - 1

    def test_shared_bin_selects_all(self):
        # Maxima within one bin width land in the same bin.
        blocks = [
            BlockStats(0, 0, 8, LsePair(0.0, 3.0)),
            BlockStats(1, 8, 8, LsePair(-BIN_WIDTH / 3, 2.0)),
            BlockStats(2, 16, 8, LsePair(-BIN_WIDTH / 2.5, 1.0)),
        ]
        for p in (0.1, 0.5, 0.99):
            res = histogram_threshold(blocks, p)
            assert res.block_mask.all()

    def test_coverage_guarantee_random(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            s = rng.normal(size=int(rng.integers(5, 400))) * rng.uniform(0.5, 8)
            blocks = block_partition_stats(s, 16)
            for p in (0.5, 0.9, 0.99):
                res = histogram_threshold(blocks, p)
                assert res.covered_mass >= p
                assert hist_mass(blocks, res.block_mask) >= p

    def test_overshoot_bound_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            s = rng.normal(size=int(rng.integers(30, 500))) * rng.uniform(0.5, 6)
            blocks = block_partition_stats(s, 16)
            p = float(rng.uniform(0.3, 0.99))
            res = histogram_threshold(blocks, p)
            exact_count = block_top_p_exact(blocks, p)
            m = np.array([b.lse.m for b in blocks])
            m_star = m.max()
            idx = np.clip(((m - (m_star - HIST_RANGE)) / BIN_WIDTH).astype(int), 0, N_BINS - 1)
            in_threshold_bin = int((idx == res.threshold_bin).sum())
            assert int(res.block_mask.sum()) <= exact_count + in_threshold_bin

    def test_far_below_blocks_clamp_to_bin_zero(self):
        blocks = [
            BlockStats(0, 0, 4, LsePair(0.0, 2.0)),
            BlockStats(1, 4, 4, LsePair(-500.0, 3.0)),
        ]
        sketch = build_histogram(blocks)
        assert sketch.bins[0] == pytest.approx(3.0 * math.exp(-500.0))
        assert sketch.bins[N_BINS - 1] == pytest.approx(2.0)

    def test_p_one_reaches_every_representable_block(self):
        # p = 1 needs every scrap of f64-visible mass, even 20 logs down.
        blocks = [
            BlockStats(0, 0, 4, LsePair(0.0, 2.0)),
            BlockStats(1, 4, 4, LsePair(-20.0, 3.0)),
        ]
        res = histogram_threshold(blocks, 1.0)
        assert res.block_mask.all()
        assert res.covered_mass == pytest.approx(1.0)

    def test_mask_consistent_with_active_set(self):
        rng = np.random.default_rng(8)
        s = rng.normal(size=200)
        blocks = block_partition_stats(s, 32)
        res = histogram_threshold(blocks, 0.8)
        expect = []
        for b, keep in zip(blocks, res.block_mask):
            if keep:
                expect.extend(range(b.start, b.start + b.length))
        assert res.active_set.tolist() == expect

    def test_empty_blocks_rejected(self):
        with pytest.raises(ArgumentError):
            histogram_threshold([], 0.9)


class TestSplitMerge:
    def test_single_split_identity(self):
        s = np.random.default_rng(9).normal(size=100)
        blocks = block_partition_stats(s, 32)
        assert split_merge([blocks]) == blocks

    def test_two_splits_match_unsplit(self):
        s = np.random.default_rng(10).normal(size=256)
        left = block_partition_stats(s[:128], 64, start=0)
        right = block_partition_stats(s[128:], 64, start=128)
        merged = split_merge([left, right])
        assert merged == block_partition_stats(s, 64)

    def test_selection_identical_after_merge(self):
        rng = np.random.default_rng(11)
        s = rng.normal(size=500) * 4
        cut = 192
        merged = split_merge([
            block_partition_stats(s[:cut], 64, start=0),
            block_partition_stats(s[cut:], 64, start=cut),
        ])
        direct = block_partition_stats(s, 64)
        a = histogram_threshold(merged, 0.9)
        b = histogram_threshold(direct, 0.9)
        np.testing.assert_array_equal(a.active_set, b.active_set)
        np.testing.assert_array_equal(a.block_mask, b.block_mask)
        assert a.covered_mass == b.covered_mass

    def test_gap_rejected(self):
        s = np.zeros(256)
        left = block_partition_stats(s[:64], 64, start=0)
        right = block_partition_stats(s[128:], 64, start=128)
        with pytest.raises(ArgumentError):
            split_merge([left, right])

    def test_overlap_rejected(self):
        s = np.zeros(256)
        left = block_partition_stats(s[:128], 64, start=0)
        right = block_partition_stats(s[64:], 64, start=64)
        with pytest.raises(ArgumentError):
            split_merge([left, right])

    def test_unaligned_rejected(self):
        s = np.zeros(200)
        left = block_partition_stats(s[:100], 64, start=0)   # 64 + 36: not aligned
        right = block_partition_stats(s[100:], 64, start=100)
        with pytest.raises(ArgumentError):
            split_merge([left, right])

    def test_empty_list_rejected(self):
        with pytest.raises(ArgumentError):
            split_merge([])


class TestSelectionProperties:
    @settings(max_examples=150)
    @given(
        st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=128),
        st.sampled_from([0.5, 0.9, 0.99]),
    )
    def test_histogram_coverage_property(self, raw, p):
        blocks = block_partition_stats(np.array(raw), 16)
        res = histogram_threshold(blocks, p)
        assert res.covered_mass >= p

    @settings(max_examples=100)
    @given(st.lists(st.floats(min_value=-20, max_value=20), min_size=2, max_size=80))
    def test_exact_beats_or_equals_blocks_in_size(self, raw):
        # Token-level selection can never need more tokens than the block
        # route selects for the same p.
        s = np.array(raw)
        exact = top_p_exact(s, 0.9)
        blocks = block_partition_stats(s, 8)
        hist = histogram_threshold(blocks, 0.9)
        assert exact.size <= hist.size


class TestFastPathEquivalence:
    """The large-input routes must reproduce the reference routes exactly."""

    def test_partitioned_walk_matches_sorted_walk(self):
        from headsparse.selection import _top_p_partitioned, _top_p_sorted

        rng = np.random.default_rng(71)
        for n in (500, 3000, 6000, 9000):
            for p in (0.5, 0.9, 0.99):
                s = rng.normal(size=n) * rng.uniform(0.5, 5)
                probs = softmax(s)
                fast = _top_p_partitioned(s, probs, p)
                ref = _top_p_sorted(s, probs, p)
                assert np.array_equal(fast.active_set, ref.active_set)
                assert fast.covered_mass == ref.covered_mass

    def test_partitioned_walk_survives_heavy_ties(self):
        # Discrete score levels force the partition cut to split tied
        # cohorts; a tiny pool forces the growth loop to run.
        from headsparse.selection import _top_p_partitioned, _top_p_sorted

        rng = np.random.default_rng(72)
        for trial in range(20):
            s = rng.integers(0, 4, size=2000).astype(np.float64)
            probs = softmax(s)
            for pool in (16, 64, 1024):
                fast = _top_p_partitioned(s, probs, 0.9, pool=pool)
                ref = _top_p_sorted(s, probs, 0.9)
                assert np.array_equal(fast.active_set, ref.active_set)

    def test_public_entry_uses_fast_path_above_cutoff(self):
        from headsparse.selection import _SORT_CUTOFF, _top_p_sorted

        rng = np.random.default_rng(73)
        s = rng.normal(size=_SORT_CUTOFF + 500) * 3
        res = top_p_exact(s, 0.9)
        ref = _top_p_sorted(s, softmax(s), 0.9)
        assert np.array_equal(res.active_set, ref.active_set)
        assert res.covered_mass == ref.covered_mass

    def test_block_lse_bitwise(self):
        from headsparse.selection import _block_lse

        rng = np.random.default_rng(74)
        for n, bs in ((640, 64), (613, 64), (40, 64), (129, 16)):
            s = rng.normal(size=n) * 4
            m, l = _block_lse(s, bs)
            for b in range(m.size):
                pair = lse_reduce(s[b * bs : min((b + 1) * bs, n)])
                assert m[b] == pair.m
                assert l[b] == pair.l

    def test_fused_histogram_matches_object_route(self):
        from headsparse.selection import histogram_threshold_scores

        rng = np.random.default_rng(75)
        for n, bs in ((640, 64), (613, 64), (50, 64), (4096, 32)):
            for p in (0.5, 0.9, 0.99):
                s = rng.normal(size=n) * rng.uniform(1, 6)
                ref = histogram_threshold(block_partition_stats(s, bs), p)
                fused = histogram_threshold_scores(s, bs, p)
                assert np.array_equal(fused.active_set, ref.active_set)
                assert fused.covered_mass == ref.covered_mass
                assert np.array_equal(fused.block_mask, ref.block_mask)
                assert fused.threshold_bin == ref.threshold_bin

    def test_fused_histogram_validation(self):
        from headsparse.selection import histogram_threshold_scores

        with pytest.raises(ArgumentError):
            histogram_threshold_scores(np.ones(10), 0, 0.9)
        with pytest.raises(ArgumentError):
            histogram_threshold_scores(np.ones(10), 4, 0.0)
        with pytest.raises(ArgumentError):
            histogram_threshold_scores(np.array([]), 4, 0.9)
