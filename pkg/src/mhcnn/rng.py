"""Deterministic pseudo-random numbers for initialization and data synthesis.

A counter-based splitmix mixing of 64-bit state, with Box-Muller for Gaussian
draws. Every consumer receives an explicit seed; there is no global generator.
Determinism is guaranteed within one build of this library; consumers that
compare against other implementations must use statistical tolerances.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based splitmix generator: draw k is mix(seed + k * golden)."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream, deterministic in (seed, key)."""
        return SplitMix64(self.spawn_seed(key))

    def spawn_seed(self, key: int) -> int:
        return _mix(self._seed ^ _mix((int(key) + 1) * _GOLDEN))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self._seed) + idx * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n float64 samples from N(mean, std^2) via Box-Muller."""
        m = (n + 1) // 2
        z = self._raw(2 * m)
        u1 = ((z[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        u2 = (z[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out * std + mean

    def randint(self, n: int) -> int:
        """One integer uniform over [0, n)."""
        return min(int(self.uniform(1)[0] * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
