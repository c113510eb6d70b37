"""Counter-based random streams.

A stream is keyed by ``(master_seed, index, purpose)`` and backed by a
Philox generator, so any task can rebuild its own stream without knowing
how work was scheduled.
"""

from __future__ import annotations

import numpy as np

DATA = 0
BOOT = 1
LEVEL2 = 2

_PURPOSES = {"data": DATA, "boot": BOOT, "level2": LEVEL2}


def stream(master_seed: int, index: int = 0, purpose: int | str = DATA) -> np.random.Generator:
    """Return the independent generator for ``(master_seed, index, purpose)``."""
    if isinstance(purpose, str):
        try:
            purpose = _PURPOSES[purpose]
        except KeyError:
            raise ValueError(f"unknown stream purpose {purpose!r}") from None
    if master_seed < 0 or index < 0 or purpose < 0:
        raise ValueError("seed, index and purpose must be non-negative")
    seq = np.random.SeedSequence([int(master_seed), int(index), int(purpose)])
    return np.random.Generator(np.random.Philox(seq))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng))
