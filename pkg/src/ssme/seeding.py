"""Seed derivation shared by every randomized component.

All randomness descends from a single integer master seed. Child seeds are a
pure function of ``(master, *keys)`` so any trial, round or grid cell can be
reproduced in isolation, independent of scheduling order.
"""

from __future__ import annotations

import numpy as np


def derive_seed(master: int, *keys: int) -> int:
    """Return a 63-bit child seed for the substream identified by ``keys``."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(master: int, *keys: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
