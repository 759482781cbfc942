"""Seed-derived random streams.

Every consumer of randomness gets its own ``numpy.random.Generator`` built
from ``(seed, tag, ...)`` so that adding draws in one place never shifts
the draws seen elsewhere.
"""

import hashlib

import numpy as np


def _tag_word(tag) -> int:
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_tag_word(t) for t in tags)])


def stream(seed: int, *tags) -> np.random.Generator:
    """Return an independent generator for ``seed`` and a tag path."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
