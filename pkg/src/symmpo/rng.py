"""Portable seeded random streams.

All randomness in the package goes through :class:`SplitMix64` so that a
dataset generated from a seed is reproducible on any platform and in any
language that implements the same 64-bit mixing function.

Stream derivation: ``stream(seed, a, b, ...)`` folds each integer tag into
the seed with the SplitMix64 finalizer, so every (seed, tag path) pair gets
an independent-looking generator without sharing state.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 output finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sebastiano Vigna's SplitMix64 generator with a few distribution helpers."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        """Uniform double in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def bernoulli(self, p: float = 0.5) -> int:
        return 1 if self.random() < p else 0

    def normal(self) -> float:
        """Standard normal via Box-Muller (one draw per call, the sine half is discarded)."""
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct integers from range(n), in draw order."""
        if not 0 <= k <= n:
            raise ValueError("sample size out of range")
        return self.permutation(n)[:k]


def stream(seed: int, *tags: int) -> SplitMix64:
    """Independent generator for a (seed, tag path)."""
    z = mix64(int(seed) & MASK64)
    for tag in tags:
        z = mix64(z ^ mix64((int(tag) + 1) * GOLDEN))
    return SplitMix64(z)
