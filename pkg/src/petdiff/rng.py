"""Counter-based deterministic random streams.

A stream is an immutable (seed, counter) pair over numpy's Philox generator.
Equal pairs always produce equal draws; distinct counters occupy disjoint
2**128-draw blocks of the Philox counter space, so substreams never overlap.
Streams are value objects: every draw method opens a fresh generator at the
stream's position, so calling ``normal`` twice on the same stream returns the
same array.  Anything that needs several independent draws derives substreams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer; bijective on 64-bit ints."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Reproducible noise source identified by (seed, counter)."""

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at this stream's counter block."""
        key = self.seed & _MASK64
        block = self.counter & ((1 << 128) - 1)
        return np.random.Generator(np.random.Philox(key=key, counter=block << 128))

    def substream(self, index: int) -> "RngStream":
        """Derive the index-th child stream (disjoint counter block)."""
        if index < 0:
            raise ValueError("substream index must be non-negative")
        h = _mix64(self.counter & _MASK64)
        h = _mix64(h ^ _mix64((self.counter >> 64) & _MASK64) ^ _GOLDEN)
        h = _mix64(h ^ _mix64(index))
        lo = h
        hi = _mix64(h ^ _GOLDEN)
        return RngStream(self.seed, (hi << 64) | lo)

    def split(self, n: int) -> list["RngStream"]:
        return [self.substream(i) for i in range(n)]

    # One-shot draws: same stream, same arguments -> same values.

    def normal(self, shape=()) -> np.ndarray:
        return self.generator().standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        return self.generator().poisson(lam)

    def binomial(self, n: np.ndarray, p: float) -> np.ndarray:
        return self.generator().binomial(n, p)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
