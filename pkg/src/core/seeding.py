"""
Seed fan-out: every stochastic component gets its own generator derived from
the single run seed plus a key path, independent of call order.
"""

from typing import Optional, Union

import numpy as np

STAGE_KEYS = {
    "simulate": 1,
    "detect": 2,
    "track": 3,
    "calibrate": 4,
    "mirrors": 5,
    "evaluate": 6,
    "retry": 7,
}

SeedLike = Union[None, int, np.random.Generator]


def spawn_rng(seed: Optional[int], *keys: Union[int, str]) -> np.random.Generator:
    """Generator for (seed, *keys); string keys resolve through STAGE_KEYS."""
    entropy = [0 if seed is None else int(seed)]
    for key in keys:
        entropy.append(STAGE_KEYS[key] if isinstance(key, str) else int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Accept an int seed, an existing Generator, or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
