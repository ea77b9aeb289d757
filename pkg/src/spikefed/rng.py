"""Deterministic RNG substream derivation.

Every stochastic site in the simulator draws from a generator derived from the
experiment master seed plus a named path (e.g. round, client id, step). Streams
are independent of execution order and worker count, which is what makes rerun
byte-identity possible.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def _encode(part) -> int:
    # SeedSequence entropy must be non-negative ints; map labels through crc32
    # (stable across platforms and runs, unlike hash()).
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"negative path component: {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported path component type: {type(part).__name__}")


def substream(master_seed: int, *path) -> np.random.Generator:
    """Return a Generator keyed by (master_seed, *path).

    Path components are ints or short string labels. The same key always
    yields the same stream; distinct keys yield statistically independent
    streams.
    """
    entropy = [_encode(master_seed)] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
