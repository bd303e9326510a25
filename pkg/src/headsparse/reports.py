"""Artifact emission and measurement: CSV/JSON writers with fixed headers,
their loaders (every file round-trips), the attention-mass-vs-budget sweep,
and the decode latency bench."""

from __future__ import annotations

import csv
import json
import platform
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import DecodeTrace, SparsityReport, retrieval_head_decode
from .errors import ArgumentError
from .indexer import ProjectedKeyCache, init_projector
from .rope import RopeParams
from .seeding import derive_rng
from .selection import top_k_static, top_p_exact
from .workload import (
    KVCacheHead,
    ModelGeometry,
    Workload,
    build_cache,
    dense_attention,
)

TRACE_HEADER = ["layer", "head", "position", "tokens_selected",
                "projected_mass", "true_mass"]
SCORE_HEADER = ["layer", "head", "score"]
LOSS_HEADER = ["step", "loss"]
HEAD_COUNT_HEADER = ["layer", "head", "role", "rows", "mean_selected",
                     "p50_selected", "p95_selected", "max_selected"]
SWEEP_HEADER = ["selector", "budget", "mean_mass", "mean_tokens"]
BENCH_HEADER = ["length", "mode", "median_ms", "p95_ms"]


def write_csv(path: str | Path, header: Sequence[str],
              rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path, expect_header: Sequence[str] | None = None
             ) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise ArgumentError(f"cannot read {path}: {e}") from e
    if not rows:
        raise ArgumentError(f"{path} is empty")
    if expect_header is not None and rows[0] != list(expect_header):
        raise ArgumentError(f"{path} header {rows[0]} != {list(expect_header)}")
    return rows[1:]


def write_decode_trace(path: str | Path, traces: Sequence[DecodeTrace]) -> None:
    rows = []
    for t in traces:
        true_mass = "" if t.covered_true_mass is None else repr(t.covered_true_mass)
        rows.append([t.layer, t.q_head, t.position, t.tokens_selected,
                     repr(t.covered_projected_mass), true_mass])
    write_csv(path, TRACE_HEADER, rows)


def read_decode_trace(path: str | Path) -> list[dict]:
    out = []
    for r in read_csv(path, TRACE_HEADER):
        out.append({
            "layer": int(r[0]), "head": int(r[1]), "position": int(r[2]),
            "tokens_selected": int(r[3]), "projected_mass": float(r[4]),
            "true_mass": None if r[5] == "" else float(r[5]),
        })
    return out


def write_sparsity_report(path: str | Path, report: SparsityReport) -> None:
    payload = {
        "compute_sparsity": report.compute_sparsity,
        "memory_sparsity": report.memory_sparsity,
        "per_head_active": report.per_head_active.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_sparsity_report(path: str | Path) -> SparsityReport:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"cannot read sparsity report {path}: {e}") from e
    return SparsityReport(
        compute_sparsity=payload["compute_sparsity"],
        memory_sparsity=payload["memory_sparsity"],
        per_head_active=np.asarray(payload["per_head_active"]),
    )


def head_token_count_rows(traces: Sequence[DecodeTrace]) -> list[list]:
    """Per-head active-set size summary, one row per (layer, head)."""
    groups: dict[tuple[int, int], list[DecodeTrace]] = {}
    for t in traces:
        groups.setdefault((t.layer, t.q_head), []).append(t)
    rows = []
    for (layer, head) in sorted(groups):
        entries = groups[(layer, head)]
        sizes = np.array([t.tokens_selected for t in entries])
        rows.append([
            layer, head, entries[0].role, sizes.size,
            round(float(sizes.mean()), 3),
            int(np.percentile(sizes, 50)),
            int(np.percentile(sizes, 95)),
            int(sizes.max()),
        ])
    return rows


def mass_budget_sweep(workload: Workload, geometry: ModelGeometry, layer: int,
                      q_head: int, positions: Sequence[int],
                      budgets: Sequence[int], p: float) -> list[list]:
    """Dense-row oracle sweep: attention mass captured by static top-k
    budgets versus top-p at the same positions. Selection runs on the true
    scores, so this measures the budget tradeoff itself, not indexer error."""
    if not positions:
        raise ArgumentError("no positions to sweep")
    from .workload import dense_row_scores, qhead_to_kvhead

    cache = build_cache(workload, layer, qhead_to_kvhead(geometry, q_head))
    masses: dict[tuple[str, int | float], list[tuple[float, int]]] = {}
    for t in positions:
        scores = dense_row_scores(workload.queries[layer, q_head, t], t, cache,
                                  geometry.scale)
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        for k in budgets:
            sel = top_k_static(scores, k)
            masses.setdefault(("top_k", k), []).append(
                (float(weights[sel.active_set].sum()), sel.size))
        sel = top_p_exact(scores, p)
        masses.setdefault(("top_p", p), []).append(
            (float(weights[sel.active_set].sum()), sel.size))
    rows = []
    for (selector, budget), vals in masses.items():
        mean_mass = float(np.mean([v[0] for v in vals]))
        mean_tokens = float(np.mean([v[1] for v in vals]))
        rows.append([selector, budget, round(mean_mass, 6), round(mean_tokens, 2)])
    return rows


# ---------------------------------------------------------------------------
# Decode latency bench
# ---------------------------------------------------------------------------

BENCH_MODES = ("dense", "sparse_exact", "sparse_histogram")


@dataclass
class BenchRow:
    length: int
    mode: str
    median_ms: float
    p95_ms: float


def bench_decode(lengths: Sequence[int], seed: int, *, n_steps: int = 30,
                 warmup: int = 5, p: float = 0.9, head_dim: int = 64,
                 r: int = 16, block_size: int = 64) -> list[BenchRow]:
    """Wall-clock per decode step against static synthetic caches: the dense
    oracle row versus sparse decode in both selector modes. A few high-gain
    key spans give the score vectors the block-level concentration selective
    decode exploits; the dense row's cost is structure-blind either way.
    Warmup calls are discarded; the projected-key cache is synced before
    timing starts, since at steady state projection work is incremental."""
    if n_steps < 1:
        raise ArgumentError("need at least one measured iteration")
    if warmup < 0:
        raise ArgumentError("warmup must be >= 0")
    rows = []
    for L in lengths:
        rng = derive_rng(seed, f"bench-{L}")
        keys = rng.normal(size=(L, head_dim))
        gain = np.full(L, 0.25)
        for s0 in rng.integers(0, max(1, L - block_size), size=8):
            gain[s0 : s0 + block_size] = 1.5
        cache = KVCacheHead(RopeParams(head_dim), capacity=L)
        cache.extend(
            (keys * gain[:, None]).astype(np.float32),
            rng.normal(size=(L, head_dim)).astype(np.float32),
            np.arange(L),
        )
        projector = init_projector(r, head_dim, seed)
        pkc = ProjectedKeyCache(projector, capacity=L)
        pkc.sync(cache)
        queries = rng.normal(size=(warmup + n_steps, head_dim))
        pos = L - 1

        def dense_step(q):
            dense_attention(q, pos, cache)

        def exact_step(q):
            retrieval_head_decode(q, pos, cache, projector, p, "exact", pkc=pkc)

        def hist_step(q):
            retrieval_head_decode(q, pos, cache, projector, p, "histogram",
                                  block_size=block_size, pkc=pkc)

        for mode, fn in zip(BENCH_MODES, (dense_step, exact_step, hist_step)):
            times = []
            for i, q in enumerate(queries):
                t0 = time.perf_counter()
                fn(q)
                dt = time.perf_counter() - t0
                if i >= warmup:
                    times.append(dt * 1e3)
            rows.append(BenchRow(L, mode, float(np.median(times)),
                                 float(np.percentile(times, 95))))
    return rows


def bench_metadata(seed: int) -> dict:
    return {
        "seed": seed,
        "machine": platform.machine(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def write_bench(path: str | Path, rows: Sequence[BenchRow]) -> None:
    write_csv(path, BENCH_HEADER,
              [[r.length, r.mode, repr(r.median_ms), repr(r.p95_ms)] for r in rows])


def read_bench(path: str | Path) -> list[BenchRow]:
    return [BenchRow(int(r[0]), r[1], float(r[2]), float(r[3]))
            for r in read_csv(path, BENCH_HEADER)]
