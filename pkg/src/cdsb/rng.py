"""Seeded random streams.

Every consumer of randomness asks for a generator keyed by the root seed plus
a tuple of integer or string tags, so two runs with the same seed draw the
same numbers regardless of the order in which independent parts execute.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *keys: int | str) -> int:
    """Derive a plain integer seed for a sub-computation."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
