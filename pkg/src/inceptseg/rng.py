"""Keyed random streams.

Every stochastic consumer (weight init, dropout, patch sampling, shuffling,
synthetic data) asks for its own stream keyed by the run seed plus a tuple of
names/integers.  Streams are Philox (a counter-based generator), so the
randomness one consumer sees never depends on how much another one drew.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _words(part: int | str) -> list[int]:
    if isinstance(part, str):
        return [zlib.crc32(part.encode("utf-8")) & _MASK32, len(part)]
    part = int(part)
    if part < 0:
        raise ValueError("stream key integers must be non-negative")
    return [part & _MASK32, (part >> 32) & _MASK32]


def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    entropy = _words(seed)
    for part in key:
        entropy.extend(_words(part))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
