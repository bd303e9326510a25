"""Softmax, log-sum-exp bookkeeping, and KL divergence.

Scores are stored in float32 elsewhere, but every reduction here promotes to
float64 before accumulating and only converts back (if at all) at the edges.
Streaming softmax state is carried as (running max, sum of shifted exps)
pairs so partial results over different key ranges can be merged exactly.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, NumericError

# Probabilities below this are treated as this value inside log ratios.
KL_EPS = 1e-9


class LsePair(NamedTuple):
    """Streaming softmax state: max `m` and shifted mass `l = sum exp(s - m)`."""

    m: float
    l: float


def require_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Return x as a float64 array, raising NumericError on NaN/inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def softmax(scores: np.ndarray) -> np.ndarray:
    """Shift-stable softmax along the last axis, computed in float64."""
    arr = require_finite(scores, "scores")
    if arr.size == 0:
        raise ArgumentError("softmax of an empty score vector is undefined")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def lse_reduce(scores: np.ndarray) -> LsePair:
    """Fold a score vector into a single (max, shifted mass) pair."""
    arr = require_finite(scores, "scores")
    if arr.size == 0:
        raise ArgumentError("lse_reduce needs at least one score")
    m = float(arr.max())
    return LsePair(m, float(np.exp(arr - m).sum()))


def lse_merge2(a: LsePair, b: LsePair) -> LsePair:
    """Combine two streaming states as if their scores were concatenated."""
    m = max(a.m, b.m)
    return LsePair(m, a.l * np.exp(a.m - m) + b.l * np.exp(b.m - m))


def lse_merge(pairs: Sequence[LsePair]) -> LsePair:
    """Merge a non-empty sequence of streaming states into one."""
    if len(pairs) == 0:
        raise ArgumentError("lse_merge needs at least one pair")
    acc = LsePair(*pairs[0])
    for p in pairs[1:]:
        acc = lse_merge2(acc, LsePair(*p))
    return acc


def log_sum_exp(scores: np.ndarray) -> float:
    """Numerically stable log(sum(exp(scores)))."""
    pair = lse_reduce(scores)
    return pair.m + float(np.log(pair.l))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) over matching supports, in nats.

    q is clamped from below at KL_EPS inside the log so an over-confident
    reference cannot produce inf; the result is clamped at zero so float
    round-off on (near-)identical inputs cannot go negative.
    """
    parr = require_finite(p, "p")
    qarr = require_finite(q, "q")
    if parr.shape != qarr.shape:
        raise ArgumentError(f"shape mismatch: {parr.shape} vs {qarr.shape}")
    if np.any(parr < 0) or np.any(qarr < 0):
        raise ArgumentError("probabilities must be non-negative")
    qc = np.maximum(qarr, KL_EPS)
    mask = parr > 0
    val = float(np.sum(parr[mask] * np.log(parr[mask] / qc[mask])))
    return max(val, 0.0)
