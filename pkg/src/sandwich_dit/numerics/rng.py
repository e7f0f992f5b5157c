"""Seeded random streams. All randomness in the package flows through :class:`Rng`."""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """PCG64 stream keyed by a 64-bit seed; ``counter`` counts draws made so far.

    ``child(key)`` derives an independent stream from ``(seed, key)`` without
    consuming draws from the parent, so adding a consumer never shifts the
    sequence seen by another.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self._path = _path
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_path])))

    def child(self, key: str | int) -> "Rng":
        k = zlib.crc32(key.encode()) if isinstance(key, str) else int(key) & 0xFFFFFFFF
        return Rng(self.seed, self._path + (k,))

    def normal(self, shape=(), scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        self.counter += 1
        return (self._gen.standard_normal(shape) * scale).astype(dtype, copy=False)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        self.counter += 1
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def gumbel(self, shape=(), dtype=np.float64) -> np.ndarray:
        self.counter += 1
        u = self._gen.uniform(np.finfo(np.float64).tiny, 1.0, shape)
        return (-np.log(-np.log(u))).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path}, counter={self.counter})"
