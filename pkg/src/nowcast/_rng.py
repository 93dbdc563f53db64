"""Seeded, splittable random streams.

Every random draw in the package comes from a stream identified by a master
seed plus a tuple of keys (stage name, repetition index, ...). Streams are
independent of evaluation order, so repetitions can run on any worker.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return int(k)


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return the generator for stream ``keys`` under master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(ss)
