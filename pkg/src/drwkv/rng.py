"""Reproducible random streams.

A stream is numpy's Philox-4x64 counter-based generator keyed by the pair
``(seed, stream)``, so independent streams (one per training step, one per
sample) need no saved state.  Uniforms are Philox doubles in [0, 1); normals
use the Box-Muller transform on pairs of uniforms, and integers use
``floor(u * n)``.  None of the transforms depend on numpy's own (versioned)
distribution algorithms.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & _MASK, self.stream & _MASK], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self._gen.random(shape)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self._gen.random(shape) < p
