"""SplitMix64 random streams.

Output ``i`` of a stream seeded with ``s`` is ``mix(s + (i + 1) * GAMMA)``
where ``mix`` is the SplitMix64 finaliser.  Everything is plain uint64
arithmetic, so streams are identical on every platform and numpy version.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the stream for ``seed``."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64) * GAMMA
        return _mix(np.uint64(seed & _MASK) + steps)


class SeededRng:
    """Counter-based SplitMix64 generator with numpy-shaped draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64) * GAMMA
            out = _mix(np.uint64(self.seed) + steps)
        self._counter += n
        return out

    def child(self, *keys: int) -> "SeededRng":
        """Independent stream derived from this seed and integer ``keys``."""
        state = self.seed
        for k in keys:
            state = int(splitmix64(state ^ (int(k) & _MASK), 1)[0])
        return SeededRng(int(splitmix64(state, 1)[0]))

    def random(self, size=None) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(size)) if size is not None else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(size) if size is not None else float(u[0])

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        """Box-Muller normals."""
        n = int(np.prod(size)) if size is not None else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return z.reshape(size) if size is not None else float(z[0])

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        n = int(np.prod(size)) if size is not None else 1
        vals = low + (self._raw(n) % np.uint64(span)).astype(np.int64)
        return vals.reshape(size) if size is not None else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        keys = self._raw(n)
        return np.argsort(keys, kind="stable")
