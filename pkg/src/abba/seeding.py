"""Independent random streams derived from one integer seed."""

import zlib

import numpy as np


def rng_stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator for ``(seed, purpose, *keys)``.

    ``default_rng([s, 0])`` equals ``default_rng(s)`` because trailing zero
    words are dropped, so sub-streams are keyed through ``spawn_key`` with a
    per-purpose tag instead of by extending the entropy list.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(tag, *map(int, keys))))
