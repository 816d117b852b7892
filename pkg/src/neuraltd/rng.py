"""Named, splittable random streams.

Every run derives independent generators from ``(master_seed, stream)`` so that
initialization and sampling never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_id(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(name.encode("utf-8"))


def make_rng(master_seed: int, *stream: str | int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by the seed and a stream path."""
    key = [int(master_seed)] + [stream_id(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
