"""Deterministic random numbers for the synthetic benchmark.

Everything stochastic in scene generation and detector simulation runs off a
splitmix-style 64-bit generator so that a seed reproduces the same bytes on any
platform and numpy version. The generator is the usual additive-counter /
finalizer design:

    state_k = seed + k * GOLDEN            (mod 2^64, k = 1, 2, ...)
    out_k   = mix64(state_k)

with mix64 the murmur-inspired finalizer (xor-shift 30 / multiply M1 /
xor-shift 27 / multiply M2 / xor-shift 31). Uniform doubles take the top 53
bits; gaussians come from Box-Muller on consecutive uniforms. The counter form
makes a vectorized numpy evaluation trivially identical to the scalar one,
which the tests assert.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX_M1 = 0xBF58476D1CE4E5B9
MIX_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_DOUBLE_SCALE = 2.0 ** -53


def mix64(x: int) -> int:
    """Finalize a 64-bit state into an output word."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * MIX_M1) & _MASK
    x = ((x ^ (x >> 27)) * MIX_M2) & _MASK
    return x ^ (x >> 31)


class SplitMix64:
    """Sequential splitmix-style stream with a few distribution helpers."""

    def __init__(self, seed: int):
        self._counter = seed & _MASK
        self._spare_gauss: float | None = None

    def next_u64(self) -> int:
        self._counter = (self._counter + GOLDEN) & _MASK
        return mix64(self._counter)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _DOUBLE_SCALE

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on the top bits."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        # Rejection keeps the distribution exact and stays deterministic.
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def choice(self, items):
        return items[self.randint(len(items))]

    def gauss(self) -> float:
        """Standard normal via Box-Muller; pairs are consumed in order."""
        if self._spare_gauss is not None:
            z = self._spare_gauss
            self._spare_gauss = None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))  # 1 - u1 in (0, 1], no log(0)
        self._spare_gauss = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def fork(self, tag: int) -> "SplitMix64":
        """Derive an independent child stream; used for per-scene seeds."""
        return SplitMix64(mix64(self._counter ^ mix64(tag)))


def uniform_field(seed: int, count: int) -> np.ndarray:
    """Vectorized stream: the first `count` uniforms of SplitMix64(seed).

    Bit-identical to calling SplitMix64(seed).uniform() `count` times.
    """
    counters = (
        np.uint64(seed) + np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN)
    )
    x = counters
    x = (x ^ (x >> np.uint64(30))) * np.uint64(MIX_M1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(MIX_M2)
    x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
