"""Seeded pseudo-randomness with a fixed, self-contained algorithm.

The generator is a splitmix64 counter stream: draw ``n`` is the splitmix64
finalizer applied to ``seed + (n+1) * GAMMA`` (mod 2**64). Because each output
depends only on the seed and the draw index, blocks of draws vectorize as a
single uint64 array computation, and identical seeds give identical sequences
regardless of how draws are batched.

Uniforms take the top 53 bits of each output; normals are Box-Muller pairs.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA_INT = 0x9E3779B97F4A7C15
_GAMMA = np.uint64(_GAMMA_INT)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_INV_2_53 = float(2.0**-53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic random stream seeded by a 64-bit integer."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        # state kept as a masked python int; uint64 wraparound in numpy
        # scalars warns, array arithmetic wraps silently
        self._state = int(seed) & _MASK64

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 outputs; advances the stream by ``n``."""
        offsets = np.arange(1, n + 1, dtype=np.uint64)
        counters = np.uint64(self._state) + _GAMMA * offsets
        self._state = (self._state + _GAMMA_INT * n) & _MASK64
        return _mix(counters)

    def random(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def uniform(self, low: float, high: float, size: int | tuple[int, ...] = ()):
        return low + (high - low) * self.random(size)

    def normal(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log(u1) is finite; u2 in [0, 1).
        u1 = ((self._raw(pairs) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (self._raw(pairs) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, upper: int, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Uniform integers in [0, upper)."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        idx = np.floor(self.random(size) * upper).astype(np.int64)
        return idx

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        order = np.arange(n, dtype=np.int64)
        if n < 2:
            return order
        draws = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def child_seed(self) -> int:
        """Fresh 64-bit seed for a derived stream; advances by one draw."""
        return int(self._raw(1)[0])

    def spawn(self) -> "Rng":
        """Independent child stream; advances this stream by one draw."""
        return Rng(self.child_seed())

    def fork(self, k: int) -> list["Rng"]:
        return [self.spawn() for _ in range(k)]
