"""Deterministic seed derivation for replicated computations.

Every bootstrap replicate and Monte Carlo repetition draws from an RNG
seeded purely by ``(base_seed, stream_id, index)``, so results are
reproducible across process boundaries, transports, and restarts without
any shared state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def replicate_seed(base_seed: int, stream_id: str, index: int) -> int:
    """Derive the 64-bit seed for replicate ``index`` of a named stream.

    The stream id is typically a site identifier; the index a bootstrap
    replicate or Monte Carlo repetition number.
    """
    h = fnv1a64(stream_id.encode("utf-8"))
    return splitmix64(splitmix64((base_seed & _MASK64) ^ h) ^ (index & _MASK64))


def replicate_rng(base_seed: int, stream_id: str, index: int) -> np.random.Generator:
    """RNG seeded from :func:`replicate_seed`."""
    return np.random.default_rng(replicate_seed(base_seed, stream_id, index))
