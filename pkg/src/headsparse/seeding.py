"""Deterministic RNG derivation.

A single root seed drives every stochastic step.  Each consumer derives its
own generator from the root seed plus a string label, so adding or removing
one consumer never perturbs the streams seen by the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Return a Generator for (root_seed, label), independent across labels.

    The label is hashed so that similar labels ("head-1", "head-11") still
    land far apart in seed space.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    # SeedSequence accepts arbitrarily many 32-bit words of entropy.
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(seq))
