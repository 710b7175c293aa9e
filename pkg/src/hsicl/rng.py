"""Explicitly passed, replayable random streams.

A :class:`Rng` is seeded through splitmix64 and backed by numpy's counter-based
Philox bit generator. There is no module level state: every stochastic
operation takes an ``Rng`` argument, and independent sub-streams are derived
with :meth:`Rng.spawn` so that adding a consumer never perturbs another one.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _tag_word(tag) -> int:
    digest = hashlib.blake2b(repr(tag).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seedable random stream.

    Identical seeds give identical streams on every platform numpy supports.
    """

    def __init__(self, seed: int = 0):
        if int(seed) < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        state, lo = splitmix64(self.seed)
        state, hi = splitmix64(state)
        self._gen = np.random.Generator(np.random.Philox(key=(hi << 64) | lo))

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def spawn(self, *tags) -> "Rng":
        """Derive an independent child stream named by ``tags``.

        The child depends only on this stream's seed and the tags, not on how
        many numbers have been drawn so far.
        """
        state = self.seed
        for tag in tags:
            state, out = splitmix64(state ^ _tag_word(tag))
            state = out
        return Rng(state)

    def random(self, shape=None) -> np.ndarray:
        """Uniform floats in [0, 1), float64."""
        return self._gen.random(shape)

    def bernoulli(self, p: float, shape=None) -> np.ndarray:
        return self._gen.random(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)
