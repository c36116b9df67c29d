"""Deterministic, platform-identical random streams for measurement noise.

Streams are built on the Philox counter-based generator keyed by
(base_seed, stream index), and Gaussians come from an explicit Box-Muller
transform over its uniforms, so the same seed yields bit-identical noise on
every platform and under any execution order of instances.
"""

from __future__ import annotations

import math

import numpy as np


class NoiseStream:
    """One reproducible Gaussian stream."""

    def __init__(self, base_seed: int, stream: int = 0):
        key = np.array([base_seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._bits = np.random.Generator(np.random.Philox(key=key))
        self.base_seed = base_seed
        self.stream = stream

    def gauss(self, sigma: float = 1.0) -> float:
        """One N(0, sigma^2) draw via Box-Muller (cosine branch only)."""
        # 1 - random() lies in (0, 1], keeping the log finite.
        u1 = 1.0 - self._bits.random()
        u2 = self._bits.random()
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gauss_vec(self, n: int, sigma: float = 1.0) -> np.ndarray:
        return np.array([self.gauss(sigma) for _ in range(n)])
