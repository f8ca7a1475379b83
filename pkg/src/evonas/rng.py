"""Deterministic random-stream derivation.

Every stochastic step in a run draws from a generator derived from the master
seed plus a structural path (generation index, candidate id, purpose tag).
Streams are therefore independent of execution order and of how many workers
run in parallel, which is what makes full runs and mid-run resumes replayable.
"""

from __future__ import annotations

import zlib

import numpy as np

RngLike = "int | np.random.Generator"


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Generator for stream `path` (ints and strings) under a master seed.

    Strings are folded in as CRC32 so the derivation is stable across runs
    and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
