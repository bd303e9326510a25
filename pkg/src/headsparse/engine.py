"""Sparse attention engine: dense prefill for retrieval heads, sink+window
for local heads, and per-step top-p decode over projected scores.

The decode path never renormalizes approximately: whatever active set the
selector produces, the output is an exact softmax over the true scaled
post-rotation scores of that set, times the cached values. Sparsity shows
up only in which tokens participate, not in how they are weighed.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .calibration import HeadPartition
from .errors import ArgumentError, InternalError
from .indexer import ProjectedKeyCache, Projector, projected_scores
from .numerics import softmax
from .rope import rope_rotate, rope_rotate_many
from .selection import (
    SelectionResult,
    histogram_threshold_scores,
    top_k_static,
    top_p_exact,
)
from .workload import (
    AttentionRow,
    KVCacheHead,
    ModelGeometry,
    Workload,
    build_cache_prefix,
    dense_attention,
    qhead_to_kvhead,
)

ROLE_RETRIEVAL = "retrieval"
ROLE_LOCAL = "local"


@dataclass
class DecodeTrace:
    """One decode step of one query head: what was selected and what came out.

    covered_projected_mass is the selector's own coverage (softmax mass under
    the scores it ranked by); local heads select by rule rather than by score,
    so their coverage of that rule is complete and recorded as 1.0.
    covered_true_mass is the dense-attention mass of the same set and stays
    None unless an oracle pass fills it in.
    """

    layer: int
    q_head: int
    position: int
    role: str
    tokens_selected: int
    covered_projected_mass: float
    output: np.ndarray
    active_set: np.ndarray
    covered_true_mass: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.covered_projected_mass <= 1.0 + 1e-9):
            raise InternalError(
                f"projected mass {self.covered_projected_mass} outside [0, 1]"
            )
        if self.tokens_selected != self.active_set.size:
            raise InternalError("tokens_selected disagrees with the active set")
        if self.tokens_selected > self.position + 1:
            raise InternalError("active set larger than the visible prefix")


@dataclass
class SparsityReport:
    compute_sparsity: float
    memory_sparsity: float
    per_head_active: np.ndarray  # (n_layers, n_q_heads) mean active-set sizes

    def __post_init__(self):
        for name in ("compute_sparsity", "memory_sparsity"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InternalError(f"{name}={v} outside [0, 1]")


@dataclass
class PrefillResult:
    caches: dict[tuple[int, int], KVCacheHead]
    outputs: np.ndarray | None  # (n_layers, n_q_heads, n_tokens, head_dim)


@dataclass
class RunResult:
    traces: list[DecodeTrace]
    report: SparsityReport
    caches: dict[tuple[int, int], KVCacheHead] = field(repr=False, default_factory=dict)


def local_active_indices(n_visible: int, window: int, n_sinks: int) -> np.ndarray:
    """Indices a local head attends to: the first n_sinks tokens plus the
    trailing `window` tokens, as a union (they overlap on short prefixes)."""
    if n_visible <= 0:
        raise ArgumentError("no visible tokens")
    if window < 1 or n_sinks < 0:
        raise ArgumentError("window must be >= 1 and n_sinks >= 0")
    tail_start = max(n_visible - window, 0)
    if tail_start <= n_sinks:
        return np.arange(n_visible)
    return np.concatenate([np.arange(n_sinks), np.arange(tail_start, n_visible)])


def restricted_attention(query_pre: np.ndarray, query_position: int,
                         cache: KVCacheHead, active: np.ndarray,
                         scale: float | None = None) -> np.ndarray:
    """Softmax over the exact scaled post-rotation scores of `active`, times
    values; by construction identical to dense attention on the sub-cache."""
    if active.size == 0:
        raise InternalError("restricted attention over an empty set")
    if scale is None:
        scale = 1.0 / float(np.sqrt(cache.rope.head_dim))
    q_rot = rope_rotate(np.asarray(query_pre, np.float64), query_position, cache.rope)
    scores = (cache.keys_post64[active] @ q_rot) * scale
    weights = softmax(scores)
    return weights @ cache.values64[active]


def local_head_decode(query_pre: np.ndarray, query_position: int,
                      cache: KVCacheHead, window: int, n_sinks: int,
                      scale: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sink+window attention for one decode step; returns (output, indices)."""
    if len(cache) == 0:
        raise ArgumentError("cache is empty")
    n = cache.visible_count(query_position)
    if n == 0:
        raise ArgumentError(f"no token visible at position {query_position}")
    active = local_active_indices(n, window, n_sinks)
    return restricted_attention(query_pre, query_position, cache, active, scale), active


def retrieval_head_decode(query_pre: np.ndarray, query_position: int,
                          cache: KVCacheHead, projector: Projector, p: float,
                          mode: str = "exact", *, block_size: int = 64,
                          top_k: int | None = None,
                          scale: float | None = None,
                          pkc: ProjectedKeyCache | None = None,
                          layer: int = 0, q_head: int = 0
                          ) -> tuple[np.ndarray, DecodeTrace]:
    """One retrieval-head decode step: rank the visible prefix by projected
    pre-rotation scores, select by the requested mode, then attend exactly
    over the selected set. The static top_k baseline ignores p and offers no
    coverage floor; that gap is what it exists to demonstrate."""
    if len(cache) == 0:
        raise ArgumentError("cache is empty")
    if mode not in ("exact", "histogram", "top_k"):
        raise ArgumentError(f"unknown selection mode {mode!r}")
    if pkc is not None:
        proj = pkc.scores(cache, query_pre, query_position)
    else:
        proj = projected_scores(query_pre, cache, projector, query_position)
    if mode == "exact":
        sel: SelectionResult = top_p_exact(proj, p)
    elif mode == "top_k":
        if top_k is None:
            raise ArgumentError("top_k mode needs a budget")
        sel = top_k_static(proj, top_k)
    else:
        sel = histogram_threshold_scores(proj, block_size, p)
    output = restricted_attention(query_pre, query_position, cache, sel.active_set, scale)
    trace = DecodeTrace(
        layer=layer,
        q_head=q_head,
        position=int(query_position),
        role=ROLE_RETRIEVAL,
        tokens_selected=sel.size,
        covered_projected_mass=sel.covered_mass,
        output=output,
        active_set=sel.active_set,
    )
    return output, trace


def prefill(workload: Workload, geometry: ModelGeometry,
            partitions: Sequence[HeadPartition], n_tokens: int | None = None,
            compute_outputs: bool = True) -> PrefillResult:
    """Build KV caches over the prompt region and, optionally, the per-head
    prefill outputs: dense causal rows for retrieval heads, sink+window rows
    for local heads."""
    if len(partitions) != geometry.n_layers:
        raise ArgumentError("one HeadPartition per layer required")
    if n_tokens is None:
        n_tokens = workload.prefill_len
    if not (0 < n_tokens <= workload.seq_len):
        raise ArgumentError(f"n_tokens {n_tokens} out of range")
    caches = {
        (layer, g): build_cache_prefix(workload, layer, g, n_tokens)
        for layer in range(geometry.n_layers)
        for g in range(geometry.n_kv_heads)
    }
    if not compute_outputs:
        return PrefillResult(caches, None)

    L = n_tokens
    pos = np.arange(L)
    causal = pos[None, :] <= pos[:, None]
    local_cols = (pos[None, :] < geometry.n_sinks) | (
        pos[None, :] > pos[:, None] - geometry.window
    )
    outputs = np.empty((geometry.n_layers, geometry.n_q_heads, L, geometry.head_dim))
    for layer in range(geometry.n_layers):
        part = partitions[layer]
        for h in range(geometry.n_q_heads):
            cache = caches[(layer, qhead_to_kvhead(geometry, h))]
            q_rot = rope_rotate_many(
                workload.queries[layer, h, :L].astype(np.float64), pos, geometry.rope
            )
            scores = (q_rot @ cache.keys_post64[:L].T) * geometry.scale
            mask = causal if part.is_retrieval(h) else (causal & local_cols)
            scores = np.where(mask, scores, -np.inf)
            shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
            weights = shifted / shifted.sum(axis=1, keepdims=True)
            outputs[layer, h] = weights @ cache.values64[:L]
    return PrefillResult(caches, outputs)


def _as_kv_map(gqa_map) -> Callable[[int], int]:
    if callable(gqa_map):
        return gqa_map
    if isinstance(gqa_map, Mapping):
        return lambda h: gqa_map[h]
    raise ArgumentError("gqa_map must be a callable or a mapping")


def _visible(visible_counts, trace: DecodeTrace) -> int:
    if visible_counts is None:
        return trace.position + 1
    n = int(visible_counts[trace.position])
    if n < trace.tokens_selected:
        raise ArgumentError(
            f"visible count {n} at position {trace.position} below active-set size"
        )
    return n


def compute_sparsity(traces: Sequence[DecodeTrace],
                     visible_counts: Mapping[int, int] | None = None) -> float:
    """1 minus the mean attended/visible fraction over query-head steps."""
    if len(traces) == 0:
        raise ArgumentError("no traces")
    fracs = [t.tokens_selected / _visible(visible_counts, t) for t in traces]
    return 1.0 - float(np.mean(fracs))


def memory_sparsity(traces: Sequence[DecodeTrace], gqa_map,
                    visible_counts: Mapping[int, int] | None = None) -> float:
    """1 minus the mean retained/visible fraction over KV-head steps, where
    retained is the union of active sets across the query heads sharing the
    KV head."""
    if len(traces) == 0:
        raise ArgumentError("no traces")
    to_kv = _as_kv_map(gqa_map)
    groups: dict[tuple[int, int, int], list[np.ndarray]] = {}
    vis: dict[tuple[int, int, int], int] = {}
    for t in traces:
        key = (t.layer, to_kv(t.q_head), t.position)
        groups.setdefault(key, []).append(t.active_set)
        vis[key] = _visible(visible_counts, t)
    fracs = [
        np.unique(np.concatenate(sets)).size / vis[key]
        for key, sets in groups.items()
    ]
    return 1.0 - float(np.mean(fracs))


def attention_mass_report(trace: DecodeTrace, dense_row: AttentionRow) -> float:
    """Dense-row attention mass captured by the trace's active set."""
    if trace.position != dense_row.query_position:
        raise ArgumentError(
            f"trace at position {trace.position} vs dense row at "
            f"{dense_row.query_position}"
        )
    if trace.active_set.size and trace.active_set.max() >= dense_row.weights.size:
        raise ArgumentError("active set exceeds the dense row")
    return float(dense_row.weights[trace.active_set].sum())


def sparsity_report(traces: Sequence[DecodeTrace], geometry: ModelGeometry,
                    visible_counts: Mapping[int, int] | None = None) -> SparsityReport:
    per_head: dict[tuple[int, int], list[int]] = {}
    for t in traces:
        per_head.setdefault((t.layer, t.q_head), []).append(t.tokens_selected)
    means = np.zeros((geometry.n_layers, geometry.n_q_heads))
    for (layer, h), sizes in per_head.items():
        means[layer, h] = float(np.mean(sizes))
    return SparsityReport(
        compute_sparsity=compute_sparsity(traces, visible_counts),
        memory_sparsity=memory_sparsity(
            traces, lambda h: qhead_to_kvhead(geometry, h), visible_counts
        ),
        per_head_active=means,
    )


def run_workload(workload: Workload, geometry: ModelGeometry,
                 partitions: Sequence[HeadPartition],
                 projectors: Mapping[tuple[int, int], Projector],
                 *, p: float | None = None, mode: str = "exact",
                 top_k: int | None = None,
                 oracle: bool = False, trace_sample: int = 1) -> RunResult:
    """Prefill the prompt region, then decode the remaining positions head by
    head, appending each new token's KV after every head has consumed the
    position. With oracle=True, each trace also gets the dense-attention mass
    of its active set (one full dense row per step, so markedly slower)."""
    if p is None:
        p = geometry.top_p
    if trace_sample < 1:
        raise ArgumentError("trace_sample must be >= 1")
    if workload.prefill_len >= workload.seq_len:
        raise ArgumentError("workload has no decode region")
    for layer in range(geometry.n_layers):
        for h in partitions[layer].retrieval_set:
            if (layer, h) not in projectors:
                raise ArgumentError(f"no projector for retrieval head ({layer}, {h})")

    pre = prefill(workload, geometry, partitions, compute_outputs=False)
    caches = pre.caches
    pkcs = {
        (layer, h): ProjectedKeyCache(projectors[(layer, h)], capacity=workload.seq_len)
        for layer in range(geometry.n_layers)
        for h in partitions[layer].retrieval_set
    }
    traces: list[DecodeTrace] = []
    for t in range(workload.prefill_len, workload.seq_len):
        # the new token's KV lands before any head consumes the position,
        # so every query sees its own entry (self-attention at decode)
        for (layer, g), cache in caches.items():
            cache.append(
                workload.keys_pre[layer, g, t], workload.values[layer, g, t], t
            )
        record = (t - workload.prefill_len) % trace_sample == 0
        for layer in range(geometry.n_layers):
            part = partitions[layer]
            for h in range(geometry.n_q_heads):
                cache = caches[(layer, qhead_to_kvhead(geometry, h))]
                query = workload.queries[layer, h, t]
                if part.is_retrieval(h):
                    _, entry = retrieval_head_decode(
                        query, t, cache, projectors[(layer, h)], p, mode,
                        block_size=geometry.block_size, top_k=top_k,
                        scale=geometry.scale,
                        pkc=pkcs[(layer, h)], layer=layer, q_head=h,
                    )
                else:
                    out, active = local_head_decode(
                        query, t, cache, geometry.window, geometry.n_sinks,
                        scale=geometry.scale,
                    )
                    entry = DecodeTrace(
                        layer=layer, q_head=h, position=t, role=ROLE_LOCAL,
                        tokens_selected=active.size,
                        covered_projected_mass=1.0, output=out, active_set=active,
                    )
                if record:
                    if oracle:
                        row = dense_attention(query, t, cache, geometry.scale)
                        entry.covered_true_mass = attention_mass_report(entry, row)
                    traces.append(entry)
    return RunResult(traces, sparsity_report(traces, geometry), caches)
