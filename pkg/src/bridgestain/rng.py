"""Counter-keyed random streams.

Every draw is addressed by a tuple of integers (for example
``(seed, stream, t)``) and comes from a Philox generator keyed by that tuple,
so a value depends only on its address, never on how many numbers were drawn
before it. Two chains that share a seed therefore see the same noise at the
same step no matter which strategy they run.
"""
from __future__ import annotations

import numpy as np

# Domain tags keep the different consumers from ever sharing an address.
TAG_REVERSE = 0x5EED0001
TAG_FORWARD = 0x5EED0002
TAG_TRAIN = 0x5EED0003
TAG_DATA = 0x5EED0004
TAG_ORACLE = 0x5EED0005
TAG_AUGMENT = 0x5EED0006


def generator(*key: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    return np.random.Generator(np.random.Philox(seq))


def normal(shape, *key: int) -> np.ndarray:
    return generator(*key).standard_normal(shape)


def reverse_noise(shape, seed: int, t: int, stream: int = 0) -> np.ndarray:
    """The z used by the reverse step at time ``t`` of chain ``(seed, stream)``."""
    return normal(shape, TAG_REVERSE, seed, stream, t)
