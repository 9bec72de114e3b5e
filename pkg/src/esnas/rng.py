"""Counter-based random streams.

Everything that has to be reproduced on another process (perturbation
directions, episode noise) is drawn from numpy's Philox generator keyed by
explicit integers, so no generator state ever needs to be shipped.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def philox(*key: int) -> np.random.Generator:
    """Generator keyed by up to two 64-bit integers."""
    if not 1 <= len(key) <= 2:
        raise ValueError("philox key takes one or two integers")
    packed = 0
    for part in key:
        packed = (packed << 64) | (int(part) & _MASK64)
    return np.random.Generator(np.random.Philox(key=packed))


def perturbation(seed: int, dim: int) -> np.ndarray:
    """Standard-normal direction reconstructed from its 64-bit seed."""
    return philox(seed).standard_normal(dim)


def episode_generator(env_seed: int, episode: int) -> np.random.Generator:
    return philox(env_seed, episode)


def draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**64, dtype=np.uint64))
