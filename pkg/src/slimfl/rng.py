"""Keyed random streams.

Every random draw in the package comes from a stream identified by
``(seed, purpose, *keys)`` (typically round, device and trial indices).
The key is folded into a ``SeedSequence`` whose state seeds a Philox
counter-based generator, so a draw never depends on the order in which
streams are created or on how many worker threads are active.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def purpose_tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_key(seed: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    spawn_key = (purpose_tag(purpose),) + tuple(int(k) for k in keys)
    if any(k < 0 for k in spawn_key):
        raise ValueError("stream keys must be non-negative")
    return np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=spawn_key)


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator for the stream keyed by ``(seed, purpose, *keys)``."""
    return np.random.Generator(np.random.Philox(derive_key(seed, purpose, *keys)))


def exponential_gains(rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Unit-mean exponential fading gains drawn as ``-ln(1 - U)``."""
    u = rng.random(size)
    return -np.log1p(-u)
