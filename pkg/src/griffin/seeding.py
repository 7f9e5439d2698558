"""Deterministic RNG streams derived from one base seed.

Each randomness consumer gets its own counter-keyed stream so that enabling
or disabling one consumer (e.g. dropout) never shifts another's draws.
"""

from __future__ import annotations

import numpy as np

STREAM_DATA = 0
STREAM_PARAMS = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))
