"""Dynamic token selection over one head's score vector.

Two routes produce an active set:

* exact: sort the token scores, walk the softmax mass until it reaches p
  (or take a fixed top-k budget);
* sort-free: partition tokens into fixed-size blocks, keep only each
  block's log-sum-exp pair, deposit block masses into a 256-bin histogram
  keyed by block maximum, scan bins from the top until the accumulated
  mass reaches p, and emit a block-level mask.

The histogram route touches per-block summaries only, never per-token
values, and always includes the threshold bin whole, so its recomputed
coverage can overshoot p but never undershoot it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, InternalError
from .numerics import LsePair, lse_merge, lse_reduce, require_finite, softmax

N_BINS = 256
HIST_RANGE = 32.0  # natural-log units below the global max covered by bins
BIN_WIDTH = HIST_RANGE / N_BINS


@dataclass(frozen=True)
class BlockStats:
    """One block's summary: covered token range plus its LSE pair."""

    block_index: int
    start: int
    length: int
    lse: LsePair

    def __post_init__(self):
        if self.length < 1:
            raise ArgumentError("block must contain at least one token")
        if self.lse.l < 1.0 - 1e-12:
            raise ArgumentError("block LSE mass below 1 (max token missing?)")


@dataclass(frozen=True)
class HistogramSketch:
    bins: np.ndarray  # (N_BINS,) non-negative masses
    lo: float
    hi: float

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / N_BINS


@dataclass(frozen=True)
class SelectionResult:
    """Active token set plus bookkeeping from the route that produced it."""

    active_set: np.ndarray            # sorted token indices
    covered_mass: float               # softmax mass of active_set, exact
    block_mask: np.ndarray | None = None
    threshold_bin: int | None = None

    @property
    def size(self) -> int:
        return int(self.active_set.size)


def _descending_order(scores: np.ndarray) -> np.ndarray:
    """Stable descending sort: ties resolve toward the lower index."""
    return np.argsort(-scores, kind="stable")


# Above this size the exact walk switches from a full sort to an
# argpartition candidate pool; the selected set is the same, just cheaper.
_SORT_CUTOFF = 4096


def top_p_exact(scores: np.ndarray, p: float) -> SelectionResult:
    """Smallest set of highest-scoring tokens with softmax mass >= p."""
    if not (0 < p <= 1):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    s = require_finite(scores, "scores")
    if s.size == 0:
        raise ArgumentError("scores must be non-empty")
    if p >= 1.0:
        # true softmax weights are all positive, so no proper subset can
        # reach mass 1; skipping the cumsum also dodges its rounding dust
        return SelectionResult(np.arange(s.size), 1.0)
    probs = softmax(s)
    if s.size <= _SORT_CUTOFF:
        return _top_p_sorted(s, probs, p)
    return _top_p_partitioned(s, probs, p)


def _top_p_sorted(s: np.ndarray, probs: np.ndarray, p: float) -> SelectionResult:
    """Reference walk: full stable sort, cumulative mass, one threshold."""
    order = _descending_order(s)
    csum = np.cumsum(probs[order])
    # target scales with the realized total, which can sit an ulp off 1.0
    cut = int(np.searchsorted(csum, p * csum[-1], side="left"))
    cut = min(cut, s.size - 1)
    active = np.sort(order[: cut + 1])
    return SelectionResult(active, float(probs[active].sum()))


def _top_p_partitioned(s: np.ndarray, probs: np.ndarray, p: float,
                       pool: int = 1024) -> SelectionResult:
    """Exact walk over an argpartition candidate pool instead of a full sort.

    argpartition puts the `pool` largest scores in the pool, so every token
    strictly above the pool's boundary score is present and their stable
    order is exactly the prefix a full sort would walk.  Tokens tied with
    the boundary score join in index order (how the sorted walk visits
    them) before the pool is grown.  Long caches at moderate p stop well
    inside the first pool.
    """
    n = s.size
    target = p * float(probs.sum())
    while pool < n:
        cand = np.argpartition(-s, pool - 1)[:pool]
        bound = s[cand].min()
        inner = cand[s[cand] > bound]
        order = inner[np.lexsort((inner, -s[inner]))]
        csum = np.cumsum(probs[order])
        if csum.size == 0 or csum[-1] < target:
            # the partition cut can split a tied cohort; append the whole
            # cohort so the walk never skips a lower-index tied token
            order = np.concatenate([order, np.flatnonzero(s == bound)])
            csum = np.cumsum(probs[order])
        if csum.size and csum[-1] >= target:
            cut = int(np.searchsorted(csum, target, side="left"))
            active = np.sort(order[: cut + 1])
            return SelectionResult(active, float(probs[active].sum()))
        pool *= 4
    return _top_p_sorted(s, probs, p)


def top_k_static(scores: np.ndarray, k: int) -> SelectionResult:
    """Fixed budget of the k highest-scoring tokens (ties to lower index)."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    s = require_finite(scores, "scores")
    if s.size == 0:
        raise ArgumentError("scores must be non-empty")
    probs = softmax(s)
    order = _descending_order(s)
    active = np.sort(order[: min(k, s.size)])
    return SelectionResult(active, float(probs[active].sum()))


def block_partition_stats(scores: np.ndarray, block_size: int,
                          start: int = 0) -> list[BlockStats]:
    """Consecutive blocks of block_size tokens; `start` is the global index
    of the first token (used when scoring one split of a KV range)."""
    if block_size < 1:
        raise ArgumentError(f"block_size must be >= 1, got {block_size}")
    s = require_finite(scores, "scores")
    if s.size == 0:
        raise ArgumentError("scores must be non-empty")
    blocks = []
    for b, off in enumerate(range(0, s.size, block_size)):
        chunk = s[off : off + block_size]
        blocks.append(BlockStats(b, start + off, int(chunk.size), lse_reduce(chunk)))
    return blocks


def _block_masses(blocks: Sequence[BlockStats]) -> tuple[np.ndarray, np.ndarray, float]:
    """(m_b vector, mass vector referenced to the global max, global max)."""
    m = np.array([b.lse.m for b in blocks], np.float64)
    l = np.array([b.lse.l for b in blocks], np.float64)
    m_star = float(m.max())
    return m, l * np.exp(m - m_star), m_star


def build_histogram(blocks: Sequence[BlockStats]) -> HistogramSketch:
    """Two passes: find the global max, then deposit each block's mass into
    the bin of its own maximum."""
    if len(blocks) == 0:
        raise ArgumentError("no blocks to histogram")
    m, masses, m_star = _block_masses(blocks)
    bins = np.zeros(N_BINS)
    np.add.at(bins, _bin_indices(m, m_star), masses)
    return HistogramSketch(bins, m_star - HIST_RANGE, m_star)


def _bin_indices(m: np.ndarray, m_star: float) -> np.ndarray:
    lo = m_star - HIST_RANGE
    raw = np.floor((m - lo) / BIN_WIDTH).astype(np.int64)
    return np.clip(raw, 0, N_BINS - 1)


def histogram_threshold(blocks: Sequence[BlockStats], p: float) -> SelectionResult:
    """Scan the histogram top-down, cut at the first bin where cumulative
    mass reaches p of the total, and select every block at or above it."""
    if not (0 < p <= 1):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    if len(blocks) == 0:
        raise ArgumentError("no blocks to select from")
    m, masses, m_star = _block_masses(blocks)
    idx = _bin_indices(m, m_star)
    bins = np.zeros(N_BINS)
    np.add.at(bins, idx, masses)
    total = float(masses.sum())
    target = p * total
    cum = 0.0
    threshold = 0
    for b in range(N_BINS - 1, -1, -1):
        cum += float(bins[b])
        if cum >= target:
            threshold = b
            break
    else:
        # Float dust can leave cum a hair under target after the last bin.
        threshold = 0
    mask = idx >= threshold
    if not mask.any():
        raise InternalError("histogram scan selected no block")
    covered = float(math.fsum(masses[mask]) / math.fsum(masses))
    active = np.concatenate(
        [np.arange(b.start, b.start + b.length) for b, keep in zip(blocks, mask) if keep]
    )
    return SelectionResult(np.sort(active), covered, block_mask=mask,
                           threshold_bin=int(threshold))


def _block_lse(s: np.ndarray, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-block (max, shifted mass) arrays, bit-equal to lse_reduce per chunk.

    Full blocks reduce as rows of one reshaped matrix; the ragged tail is
    folded on its own so its summation tree matches the chunked form.
    """
    n_full = s.size // block_size
    parts_m, parts_l = [], []
    if n_full:
        mat = s[: n_full * block_size].reshape(n_full, block_size)
        m = mat.max(axis=1)
        parts_m.append(m)
        parts_l.append(np.exp(mat - m[:, None]).sum(axis=1))
    if s.size % block_size:
        tail = lse_reduce(s[n_full * block_size :])
        parts_m.append(np.array([tail.m]))
        parts_l.append(np.array([tail.l]))
    return np.concatenate(parts_m), np.concatenate(parts_l)


def histogram_threshold_scores(scores: np.ndarray, block_size: int,
                               p: float) -> SelectionResult:
    """Sort-free selection straight from a raw score vector.

    Same route as block_partition_stats followed by histogram_threshold,
    fused so a decode step never materialises per-block objects; the test
    suite holds the two spellings equal bit for bit.
    """
    if not (0 < p <= 1):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    if block_size < 1:
        raise ArgumentError(f"block_size must be >= 1, got {block_size}")
    s = require_finite(scores, "scores")
    if s.size == 0:
        raise ArgumentError("scores must be non-empty")
    m, l = _block_lse(s, block_size)
    m_star = float(m.max())
    masses = l * np.exp(m - m_star)
    idx = _bin_indices(m, m_star)
    bins = np.zeros(N_BINS)
    np.add.at(bins, idx, masses)
    target = p * float(masses.sum())
    cum = 0.0
    threshold = 0
    for b in range(N_BINS - 1, -1, -1):
        cum += float(bins[b])
        if cum >= target:
            threshold = b
            break
    mask = idx >= threshold
    if not mask.any():
        raise InternalError("histogram scan selected no block")
    covered = float(math.fsum(masses[mask]) / math.fsum(masses))
    keep = np.flatnonzero(mask)
    starts = keep * block_size
    stops = np.minimum(starts + block_size, s.size)
    active = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
    return SelectionResult(active, covered, block_mask=mask,
                           threshold_bin=int(threshold))


def block_top_p_exact(blocks: Sequence[BlockStats], p: float) -> int:
    """Reference for the overshoot bound: number of blocks an exact
    block-level walk (descending block max, ties to lower index) needs
    before cumulative mass reaches p."""
    if not (0 < p <= 1):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    if len(blocks) == 0:
        raise ArgumentError("no blocks")
    m, masses, _ = _block_masses(blocks)
    order = np.lexsort((np.arange(m.size), -m))
    target = p * float(masses.sum())
    cum = 0.0
    for count, b in enumerate(order, start=1):
        cum += float(masses[b])
        if cum >= target:
            return count
    return len(blocks)


def split_merge(partials: Sequence[Sequence[BlockStats]]) -> list[BlockStats]:
    """Fuse per-split block stats into the single-list equivalent.

    Splits must cover contiguous, ordered, non-overlapping ranges and be
    block-aligned, so the result is identical to block stats computed on
    the unsplit vector.
    """
    if len(partials) == 0:
        raise ArgumentError("no splits to merge")
    flat: list[BlockStats] = []
    for split in partials:
        if len(split) == 0:
            raise ArgumentError("empty split")
        flat.extend(split)
    expect = flat[0].start
    for b in flat:
        if b.start != expect:
            raise ArgumentError(
                f"splits overlap or leave a gap at token {expect} (got start {b.start})"
            )
        expect = b.start + b.length
    block_size = flat[0].length
    for b in flat[:-1]:
        if b.length != block_size:
            raise ArgumentError("split boundaries are not block-aligned")
    if flat[-1].length > block_size:
        raise ArgumentError("split boundaries are not block-aligned")
    return [
        BlockStats(i, b.start, b.length, b.lse) for i, b in enumerate(flat)
    ]


def merged_lse(blocks: Sequence[BlockStats]) -> LsePair:
    """Whole-vector LSE pair implied by the block stats."""
    return lse_merge([b.lse for b in blocks])
