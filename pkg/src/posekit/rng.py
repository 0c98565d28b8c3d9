"""Seeded random number generation.

All randomness in the library flows through counter-based Philox generators
so that a (seed, stream) pair reproduces bit-identically on any platform.
Streams keep independent concerns (weight init, noise, masking) decoupled
without consuming each other's draws.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Philox-backed generator for the given seed and stream."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
