"""Deterministic RNG streams.

Every random draw in the simulator comes from a stream keyed by
(root seed, path of small non-negative integers), so any client step,
round, or sampling phase can be reproduced in isolation and results do
not depend on execution order.
"""
from __future__ import annotations

import numpy as np

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *path)``.

    Path components must be non-negative; the seed may be any Python int
    (negative values are mapped through two's complement).
    """
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError(f"stream path must be non-negative, got {key}")
    ss = np.random.SeedSequence(entropy=int(seed) & _SEED_MASK, spawn_key=key)
    return np.random.default_rng(ss)


def derive_seed(seed: int, *path: int) -> int:
    """Stable 63-bit child seed for APIs that take an integer seed."""
    return int(substream(seed, *path).integers(0, 2**63))
