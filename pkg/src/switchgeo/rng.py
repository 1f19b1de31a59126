"""Named, schedule-independent random substreams.

Every consumer asks for a generator keyed by ``(seed, *names)``. The key is
hashed into a Philox (counter-based) seed, so a stream never depends on how
many draws other units made or in which order units run.
"""
from __future__ import annotations

import hashlib

import numpy as np


def substream(seed, *names) -> np.random.Generator:
    key = "/".join(str(part) for part in (seed, *names))
    words = np.frombuffer(hashlib.sha256(key.encode("utf-8")).digest(), dtype=np.uint32)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words.tolist())))


def as_rng(rng, *names) -> np.random.Generator:
    """Pass generators through; turn a seed (int, str or tuple key) into ``substream(seed, *names)``."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, tuple):
        return substream(*rng, *names)
    if isinstance(rng, (int, np.integer)):
        return substream(int(rng), *names)
    return substream(rng, *names)
