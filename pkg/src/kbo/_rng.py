"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`make_rng`, which keys a
counter-based Philox generator by a 64-bit seed plus an arbitrary tuple of
integer stream identifiers. Two calls with the same key produce the same
sequence; different keys give statistically independent streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
