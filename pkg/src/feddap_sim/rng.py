"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence`` whose entropy is the experiment seed and whose spawn key
encodes (purpose, *indices). Streams for different clients, rounds or
purposes are therefore statistically independent and do not depend on the
order in which they are requested.
"""

from __future__ import annotations

import zlib

import numpy as np

def _purpose_code(purpose: str) -> int:
    # crc32 is stable across platforms and Python hash seeds
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``purpose`` at the given integer indices."""
    key = (_purpose_code(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
