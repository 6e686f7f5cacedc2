"""Splitmix-style mixing shared by seeding and green-list hashing.

Scalar helpers work on Python ints masked to 64 bits; the ``*_array`` variants
operate on ``numpy.uint64`` arrays (numpy wraps on overflow, which is what we want).
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z ^= z >> 30
    z = (z * _C1) & MASK64
    z ^= z >> 27
    z = (z * _C2) & MASK64
    z ^= z >> 31
    return z


def fold(acc: int, value: int) -> int:
    return mix64((acc & MASK64) ^ ((value + GOLDEN) & MASK64))


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * np.uint64(_C1)
        z = z ^ (z >> np.uint64(27))
        z = z * np.uint64(_C2)
        z = z ^ (z >> np.uint64(31))
    return z


def fold_array(acc, values: np.ndarray) -> np.ndarray:
    """Elementwise fold; ``acc`` is one int or an array broadcast against ``values``."""
    v = np.asarray(values, dtype=np.uint64)
    a = np.uint64(acc & MASK64) if isinstance(acc, (int, np.integer)) else np.asarray(acc, dtype=np.uint64)
    with np.errstate(over="ignore"):
        v = v + np.uint64(GOLDEN)
    return mix64_array(a ^ v)


def draw_seed(base_seed: int, index: int) -> int:
    """Per-draw seed: independent of the order in which draws are made."""
    return fold(base_seed, index)


def draw_seeds(base_seed: int, n: int, start: int = 0) -> np.ndarray:
    return fold_array(base_seed, np.arange(start, start + n, dtype=np.uint64))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


def unit_interval(h: np.ndarray | int) -> np.ndarray | float:
    """Map 64-bit hashes to [0, 1) as h / 2**64.

    Rounding to float64 can push values within 2**-53 of one up to exactly 1.0;
    those are pinned just below 1 so the half-open range holds.
    """
    top = 1.0 - 2.0**-53
    if isinstance(h, (int, np.integer)):
        return min(float(int(h)) * 2.0**-64, top)
    return np.minimum(np.asarray(h, dtype=np.uint64).astype(np.float64) * 2.0**-64, top)
