"""Deterministic, hierarchical RNG streams.

Every random draw in the package flows through `rng_for(seed, *key)`, so
any sample is a pure function of (seed, key) regardless of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def rng_for(seed: int, *key) -> np.random.Generator:
    entropy = [int(seed)] + [_as_entropy(p) for p in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))
