"""Splittable counter-based random number generation.

Built on numpy's Philox bit generator keyed through SeedSequence, so a
(seed, split-path) pair produces the same value stream on every platform
regardless of when or on which worker the stream is consumed.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng"]


class Rng:
    """Deterministic RNG addressed by a root seed plus a split path."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *indices: int) -> "Rng":
        """Child stream at `path + indices`; independent of this stream's
        consumption and of sibling streams."""
        return Rng(self.seed, self.path + indices)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.uniform() < p)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
