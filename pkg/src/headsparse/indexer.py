"""Low-rank pre-rotation relevance scoring and its KL training.

A retrieval head's token selection does not need full post-rotation scores:
a pair of r x d projections of the un-rotated query/key features suffices
to rank tokens.  The projections are trained to pull the softmax of the
projected scores toward the head's true attention row (forward KL), with
the backbone activations treated as frozen constants.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import load_container, save_container
from .errors import ArgumentError
from .numerics import kl_divergence, softmax
from .optim import AdamW, make_schedule
from .seeding import derive_rng
from .workload import KVCacheHead


@dataclass
class Projector:
    """Per-head projection pair; scores are (w_q q) . (w_k k)."""

    w_q: np.ndarray  # (r, head_dim)
    w_k: np.ndarray  # (r, head_dim)

    def __post_init__(self):
        self.w_q = np.asarray(self.w_q, np.float64)
        self.w_k = np.asarray(self.w_k, np.float64)
        if self.w_q.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise ArgumentError("w_q and w_k must both be (r, head_dim)")
        if not (np.all(np.isfinite(self.w_q)) and np.all(np.isfinite(self.w_k))):
            raise ArgumentError("projector weights must be finite")

    @property
    def r(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def n_params(self) -> int:
        return 2 * self.r * self.head_dim

    def copy(self) -> "Projector":
        return Projector(self.w_q.copy(), self.w_k.copy())

    def save(self, stem: str | Path, layer: int = 0, head: int = 0) -> None:
        save_container(
            stem,
            {"w_q": self.w_q, "w_k": self.w_k},
            meta={"kind": "projector", "layer": layer, "head": head, "r": self.r},
        )

    @staticmethod
    def load(stem: str | Path) -> tuple["Projector", dict]:
        tensors, meta = load_container(stem)
        if meta.get("kind") != "projector":
            raise ArgumentError(f"{stem} does not hold a projector")
        proj = Projector(tensors["w_q"], tensors["w_k"])
        if proj.r != meta.get("r"):
            raise ArgumentError(f"{stem}: manifest r disagrees with tensor shape")
        return proj, meta


def init_projector(r: int, head_dim: int, seed: int, label: str = "projector-init"
                   ) -> Projector:
    """Gaussian init at std 1/sqrt(head_dim): unit-scale initial scores."""
    if r < 1 or head_dim < 1:
        raise ArgumentError("r and head_dim must be positive")
    rng = derive_rng(seed, label)
    std = 1.0 / np.sqrt(head_dim)
    return Projector(
        rng.normal(size=(r, head_dim)) * std,
        rng.normal(size=(r, head_dim)) * std,
    )


def projected_scores(query_pre: np.ndarray, cache: KVCacheHead, projector: Projector,
                     query_position: int, temperature: float = 1.0) -> np.ndarray:
    """Projected relevance scores for every token visible at query_position."""
    q = np.asarray(query_pre, np.float64)
    if q.shape != (projector.head_dim,):
        raise ArgumentError(
            f"query length {q.shape} does not match projector head_dim {projector.head_dim}"
        )
    if cache.rope.head_dim != projector.head_dim:
        raise ArgumentError("cache head_dim does not match projector")
    n = cache.visible_count(query_position)
    if n == 0:
        raise ArgumentError(f"no token visible at position {query_position}")
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    u = projector.w_q @ q
    proj_keys = cache.keys_pre[:n].astype(np.float64) @ projector.w_k.T
    return (proj_keys @ u) / temperature


class ProjectedKeyCache:
    """Incrementally maintained projected keys for one (cache, projector)
    pair, so each decode step pays O(new keys) projection work instead of
    reprojecting the whole cache."""

    def __init__(self, projector: Projector, capacity: int = 256):
        self.projector = projector
        self._u = np.empty((capacity, projector.r), np.float64)
        self._n = 0

    def sync(self, cache: KVCacheHead) -> None:
        n = len(cache)
        if n < self._n:
            raise ArgumentError("cache shrank; projected keys are stale")
        if n == self._n:
            return
        if n > self._u.shape[0]:
            new = np.empty((max(n, 2 * self._u.shape[0]), self.projector.r), np.float64)
            new[: self._n] = self._u[: self._n]
            self._u = new
        fresh = cache.keys_pre[self._n : n].astype(np.float64)
        self._u[self._n : n] = fresh @ self.projector.w_k.T
        self._n = n

    def scores(self, cache: KVCacheHead, query_pre: np.ndarray, query_position: int
               ) -> np.ndarray:
        self.sync(cache)
        n = cache.visible_count(query_position)
        if n == 0:
            raise ArgumentError(f"no token visible at position {query_position}")
        u = self.projector.w_q @ np.asarray(query_pre, np.float64)
        return self._u[:n] @ u


def index_recall(selected: set[int] | Sequence[int], reference_top: set[int] | Sequence[int]
                 ) -> float:
    """Fraction of the reference top set that the selection recovered."""
    ref = set(reference_top)
    if not ref:
        raise ArgumentError("reference set must be non-empty")
    return len(set(selected) & ref) / len(ref)


def projector_loss(full_attn: np.ndarray, proj_scores: np.ndarray) -> float:
    """Forward KL from the true attention row to the projected softmax."""
    p = np.asarray(full_attn, np.float64)
    s = np.asarray(proj_scores, np.float64)
    if p.shape != s.shape:
        raise ArgumentError(f"shape mismatch: {p.shape} vs {s.shape}")
    return kl_divergence(p, softmax(s))


@dataclass(frozen=True)
class TrainingRow:
    """One supervision row: the head's exact attention over the visible
    keys, with the pre-rotation query and key features that produced it."""

    full_attn: np.ndarray   # (n,)
    query_pre: np.ndarray   # (head_dim,)
    keys_pre: np.ndarray    # (n, head_dim)


def build_stage1_dataset(workload, geometry, layer: int, q_head: int, seed: int,
                         n_rows: int = 128) -> list[TrainingRow]:
    """Supervision rows for one head from a workload's dense attention.

    Positions start at 4 * block_size: on shorter prefixes any selector is
    trivially near-perfect and the rows carry no long-range signal. Key
    matrices are views into one shared cache, so memory stays O(seq).
    """
    from .workload import build_cache, dense_attention, qhead_to_kvhead

    floor = 4 * geometry.block_size
    if workload.seq_len <= floor:
        raise ArgumentError(
            f"workload length {workload.seq_len} leaves no positions >= {floor}"
        )
    if n_rows < 1:
        raise ArgumentError("n_rows must be positive")
    cache = build_cache(workload, layer, qhead_to_kvhead(geometry, q_head))
    keys = cache.keys_pre
    span = np.arange(floor, workload.seq_len)
    rng = derive_rng(seed, f"stage1-data-L{layer}H{q_head}")
    picks = rng.choice(span, size=min(n_rows, span.size), replace=False)
    rows = []
    for t in sorted(int(t) for t in picks):
        row = dense_attention(workload.queries[layer, q_head, t], t, cache,
                              geometry.scale)
        rows.append(TrainingRow(row.weights, workload.queries[layer, q_head, t],
                                keys[: t + 1]))
    return rows


def projector_grad(batch: Sequence[TrainingRow], projector: Projector
                   ) -> tuple[np.ndarray, np.ndarray, float]:
    """Analytic gradients of the mean row loss; returns (g_wq, g_wk, loss).

    With a = W_q u, row scores s_n = a . (W_k k_n) and residual
    rho = softmax(s) - p:  dL/dW_q = outer(W_k K^T rho, u) and
    dL/dW_k = outer(a, K^T rho).
    """
    if len(batch) == 0:
        raise ArgumentError("empty batch")
    g_wq = np.zeros_like(projector.w_q)
    g_wk = np.zeros_like(projector.w_k)
    total_loss = 0.0
    for row in batch:
        p = np.asarray(row.full_attn, np.float64)
        u = np.asarray(row.query_pre, np.float64)
        keys = np.asarray(row.keys_pre, np.float64)
        if keys.shape != (p.size, projector.head_dim) or u.shape != (projector.head_dim,):
            raise ArgumentError("row shapes do not match projector")
        a = projector.w_q @ u
        proj_keys = keys @ projector.w_k.T      # (n, r)
        s = proj_keys @ a
        q_hat = softmax(s)
        total_loss += kl_divergence(p, q_hat)
        rho = q_hat - p
        kt_rho = keys.T @ rho                   # (head_dim,)
        g_wq += np.outer(projector.w_k @ kt_rho, u)
        g_wk += np.outer(a, kt_rho)
    scale = 1.0 / len(batch)
    return g_wq * scale, g_wk * scale, total_loss * scale


@dataclass(frozen=True)
class Stage1Config:
    """Projector training configuration (offline stage)."""

    max_lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "cosine"
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    steps: int = 600
    rows_per_step: int = 16

    def __post_init__(self):
        if self.max_lr < 0 or self.weight_decay < 0:
            raise ArgumentError("learning rate and weight decay must be >= 0")
        if min(self.warmup_steps, self.steps, self.rows_per_step) < 0 or self.steps < 1:
            raise ArgumentError("steps and row counts must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ArgumentError(f"unknown schedule {self.schedule!r}")
        if self.max_grad_norm <= 0:
            raise ArgumentError("max_grad_norm must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Stage1Config":
        return Stage1Config(**d)


def train_projector(dataset: Sequence[TrainingRow], config: Stage1Config, seed: int,
                    r: int = 16, head_dim: int | None = None,
                    label: str = "stage1") -> tuple[Projector, list[float]]:
    """KL-train a fresh projector on sampled dataset rows.

    Rows are drawn uniformly at random each step; the trace records each
    step's minibatch loss.  Deterministic given (config, seed, label).
    """
    if len(dataset) == 0:
        raise ArgumentError("empty dataset")
    if head_dim is None:
        head_dim = int(np.asarray(dataset[0].query_pre).size)
    proj = init_projector(r, head_dim, seed, label=f"{label}-init")
    rng = derive_rng(seed, f"{label}-rows")
    opt = AdamW(
        {"w_q": proj.w_q, "w_k": proj.w_k},
        make_schedule(config.schedule, config.max_lr, config.warmup_steps, config.steps),
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
    )
    trace: list[float] = []
    n = len(dataset)
    for _ in range(config.steps):
        take = min(config.rows_per_step, n)
        idx = rng.choice(n, size=take, replace=False)
        g_wq, g_wk, loss = projector_grad([dataset[i] for i in idx], proj)
        opt.step({"w_q": g_wq, "w_k": g_wk})
        trace.append(loss)
    return proj, trace
