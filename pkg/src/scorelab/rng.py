"""Deterministic random streams.

Every stochastic routine in the package draws from a counter-based
generator keyed by (seed, purpose tag, indices).  Streams with distinct
keys are statistically independent, and any single stream can be
reproduced in isolation, so e.g. forward noise, backward noise and
data sampling do not interfere with each other's reproducibility.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return the generator keyed by (seed, tag, *indices).

    The tag is hashed with crc32 so keys are stable across processes
    and platforms (unlike the builtin hash).
    """
    entropy = (int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode("utf-8")), *[int(i) for i in indices])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spawn_seed(seed: int, tag: str, *indices: int) -> int:
    """Derive a child seed, for handing to code that takes seeds, not streams."""
    return int(stream(seed, tag, *indices).integers(0, 2**63 - 1))
