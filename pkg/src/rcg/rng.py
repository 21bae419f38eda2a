"""Seeded random streams.

Every consumer of randomness gets its own counter-based Philox stream keyed by
a labeled hash of the master seed, so adding a new consumer never shifts the
numbers another one sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    text = "/".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    if labels:
        seed = derive_seed(seed, *labels)
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))
