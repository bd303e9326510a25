"""Offline head calibration.

A sequence with an identical content span planted early and late separates
head behavior: heads that route attention from the late copy back to the
early copy are retrieval heads, everything else is local.  The per-head
score is the mean attention mass the late-span rows place on the early
span; the top `ratio` share of heads by that score forms the retrieval set.

Calibration here always runs on caches whose positions are 0..L-1, so a
token's cache slot equals its position.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError
from .workload import (
    AttentionRow,
    KVCacheHead,
    Workload,
    build_cache,
    dense_attention,
    qhead_to_kvhead,
)


@dataclass(frozen=True)
class NeedleLayout:
    """Index sets of the early and late copies of the planted span."""

    n_pre: tuple[int, ...]
    n_post: tuple[int, ...]
    total_len: int

    def __post_init__(self):
        if not self.n_pre or not self.n_post:
            raise ArgumentError("needle index sets must be non-empty")
        if set(self.n_pre) & set(self.n_post):
            raise ArgumentError("needle index sets must be disjoint")
        if max(self.n_pre) >= min(self.n_post):
            raise ArgumentError("early span must precede late span")
        if min(self.n_pre) < 0 or max(self.n_post) >= self.total_len:
            raise ArgumentError("needle indices out of range")


@dataclass(frozen=True)
class HeadPartition:
    """Per-head scores plus the retrieval/local split they induce."""

    scores: tuple[float, ...]
    retrieval_set: tuple[int, ...]
    local_set: tuple[int, ...]
    ratio: float

    def is_retrieval(self, head: int) -> bool:
        return head in self._retrieval_lookup

    @property
    def _retrieval_lookup(self) -> frozenset:
        return frozenset(self.retrieval_set)

    @property
    def n_heads(self) -> int:
        return len(self.scores)


def build_calibration_sequence(document: np.ndarray, needle: np.ndarray
                               ) -> tuple[np.ndarray, NeedleLayout]:
    """Overwrite the document head with the needle and append a second copy.

    Token count is len(document) + len(needle): the early copy replaces the
    first needle-length tokens, the late copy is appended.
    """
    doc = np.asarray(document)
    ndl = np.asarray(needle)
    if ndl.ndim != doc.ndim or doc.shape[1:] != ndl.shape[1:]:
        raise ArgumentError("document and needle embedding widths differ")
    nl, dl = len(ndl), len(doc)
    if nl < 1:
        raise ArgumentError("needle must contain at least one token")
    if dl < 2 * nl:
        raise ArgumentError(f"needle ({nl}) longer than half the document ({dl})")
    stream = np.concatenate([ndl, doc[nl:], ndl], axis=0)
    layout = NeedleLayout(
        n_pre=tuple(range(nl)),
        n_post=tuple(range(dl, dl + nl)),
        total_len=dl + nl,
    )
    return stream, layout


def retrieval_score(attn: Sequence[AttentionRow] | Mapping[int, AttentionRow],
                    layout: NeedleLayout) -> float:
    """Mean late-row attention mass landing on the early span."""
    if isinstance(attn, Mapping):
        by_pos = dict(attn)
    else:
        by_pos = {row.query_position: row for row in attn}
    pre = np.asarray(layout.n_pre)
    total = 0.0
    for t in layout.n_post:
        row = by_pos.get(t)
        if row is None:
            raise ArgumentError(f"attention row for position {t} missing")
        if len(row.weights) <= max(layout.n_pre):
            raise ArgumentError(f"row at {t} does not cover the early span")
        total += float(np.sum(np.asarray(row.weights, np.float64)[pre]))
    score = total / len(layout.n_post)
    # Rows are probability vectors, so the mean mass cannot leave [0, 1];
    # clip only float dust.
    return float(min(max(score, 0.0), 1.0))


def retrieval_set_size(n_heads: int, ratio: float) -> int:
    """Half-up round of ratio * n_heads (platform-stable)."""
    return int(np.floor(ratio * n_heads + 0.5))


def partition_heads(scores: Sequence[float], ratio: float) -> HeadPartition:
    """Top heads by score (ties to the lower index) become retrieval."""
    s = np.asarray(scores, np.float64)
    if s.size == 0:
        raise ArgumentError("scores must be non-empty")
    if not (0 < ratio <= 1):
        raise ArgumentError(f"ratio must lie in (0, 1], got {ratio}")
    n_ret = retrieval_set_size(s.size, ratio)
    order = np.lexsort((np.arange(s.size), -s))
    retrieval = tuple(sorted(int(h) for h in order[:n_ret]))
    local = tuple(sorted(int(h) for h in order[n_ret:]))
    return HeadPartition(
        scores=tuple(float(x) for x in s),
        retrieval_set=retrieval,
        local_set=local,
        ratio=float(ratio),
    )


def layout_from_workload(workload: Workload) -> NeedleLayout:
    ann = workload.annotations
    return NeedleLayout(ann.n_pre, ann.n_post, workload.seq_len)


def head_retrieval_score(workload: Workload, layer: int, q_head: int,
                         cache: KVCacheHead | None = None) -> float:
    """Dense rows at the late-span positions for one head, reduced to R."""
    layout = layout_from_workload(workload)
    if cache is None:
        cache = build_cache(workload, layer, qhead_to_kvhead(workload.geometry, q_head))
    rows = [
        dense_attention(workload.queries[layer, q_head, t], t, cache)
        for t in layout.n_post
    ]
    return retrieval_score(rows, layout)


def calibrate(workloads: Workload | Iterable[Workload],
              ratio: float | None = None) -> list[HeadPartition]:
    """Score every (layer, head) and partition per layer.

    Accepts one workload (the normal single-sequence mode) or several, in
    which case per-head scores are averaged before partitioning.
    """
    wls = [workloads] if isinstance(workloads, Workload) else list(workloads)
    if not wls:
        raise ArgumentError("no workloads to calibrate on")
    geo = wls[0].geometry
    if ratio is None:
        ratio = geo.retrieval_ratio
    partitions = []
    for layer in range(geo.n_layers):
        scores = np.zeros(geo.n_q_heads)
        for w in wls:
            if w.geometry != geo:
                raise ArgumentError("all calibration workloads must share a geometry")
            caches = {
                g: build_cache(w, layer, g) for g in range(geo.n_kv_heads)
            }
            for h in range(geo.n_q_heads):
                scores[h] += head_retrieval_score(
                    w, layer, h, caches[qhead_to_kvhead(geo, h)]
                )
        partitions.append(partition_heads(scores / len(wls), ratio))
    return partitions


PARTITION_HEADER = ["layer", "head", "score", "role"]


def save_partitions(path: str | Path, partitions: Sequence[HeadPartition]) -> None:
    """Persist per-layer partitions as a small CSV."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PARTITION_HEADER)
        for layer, part in enumerate(partitions):
            for head, score in enumerate(part.scores):
                role = "retrieval" if part.is_retrieval(head) else "local"
                # repr round-trips float64 exactly through the CSV.
                writer.writerow([layer, head, repr(score), role])


def load_partitions(path: str | Path, ratio: float) -> list[HeadPartition]:
    """Rebuild partitions from the CSV; the split is recomputed from scores
    and cross-checked against the stored roles."""
    rows: dict[int, dict[int, tuple[float, str]]] = {}
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != PARTITION_HEADER:
                raise ArgumentError(f"unexpected partition header in {path}")
            for rec in reader:
                rows.setdefault(int(rec["layer"]), {})[int(rec["head"])] = (
                    float(rec["score"]),
                    rec["role"],
                )
    except OSError as e:
        raise ArgumentError(f"cannot read partition file {path}: {e}") from e
    if not rows:
        raise ArgumentError(f"partition file {path} is empty")
    partitions = []
    for layer in sorted(rows):
        by_head = rows[layer]
        scores = [by_head[h][0] for h in range(len(by_head))]
        part = partition_heads(scores, ratio)
        stored_ret = {h for h, (_, role) in by_head.items() if role == "retrieval"}
        if stored_ret != set(part.retrieval_set):
            raise ArgumentError(
                f"stored roles in {path} disagree with ratio {ratio} at layer {layer}"
            )
        partitions.append(part)
    return partitions
