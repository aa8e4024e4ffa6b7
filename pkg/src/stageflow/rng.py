"""Seeded xorshift-family PRNG.

The generator is xorshift64* (Vigna 2016): the 64-bit state is updated by
three shifts/xors and the output is the state times an odd constant. Seeds
are conditioned through one round of splitmix64 so that small integers and
zero are valid seeds. Doubles take the top 53 bits of the output; normals
come from the Box-Muller transform applied to consecutive uniform pairs.

Everything here is pure integer arithmetic, so streams are identical on any
platform and any run given the same seed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_STAR = 2685821657736338717
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def fnv1a64(text: str) -> int:
    """Stable 64-bit string hash (Python's hash() is salted per process)."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class Rng:
    """xorshift64* stream with uniform/normal/integer draws."""

    def __init__(self, seed: int):
        state = _splitmix64(seed & _MASK)
        if state == 0:  # xorshift state must be nonzero
            state = _SPLITMIX_GAMMA
        self._state = state
        self._spare_normal: float | None = None

    def u64(self) -> int:
        s = self._state
        s ^= (s >> 12)
        s ^= (s << 25) & _MASK
        s ^= (s >> 27)
        self._state = s
        return (s * _STAR) & _MASK

    def uniform(self) -> float:
        """Double in [0, 1) with 53 random bits."""
        return (self.u64() >> 11) * (2.0 ** -53)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def randint(self, n: int) -> int:
        """Integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (_MASK + 1) - ((_MASK + 1) % n)
        while True:
            x = self.u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # Box-Muller; u1 nudged away from 0 so log() is finite.
        u1 = self.uniform()
        u2 = self.uniform()
        if u1 <= 0.0:
            u1 = 2.0 ** -53
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, shape: tuple[int, ...] | int) -> np.ndarray:
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape)) if shape else 1
        out = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        return out.reshape(shape)

    def spawn(self, label: str, index: int = 0) -> "Rng":
        """Independent child stream keyed by a stable label and index."""
        return Rng(_splitmix64(self._state ^ fnv1a64(label) ^ _splitmix64(index)))


def stream(seed: int, label: str, index: int = 0) -> Rng:
    """Named substream of a root seed, stable across runs and call order."""
    return Rng(_splitmix64(seed & _MASK) ^ fnv1a64(label) ^ _splitmix64(index))
