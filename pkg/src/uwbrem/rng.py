"""Seedable PRNG used everywhere randomness is consumed.

The generator is xoshiro256** (Blackman & Vigna) with splitmix64 seeding,
chosen so that a run is reproducible from a single 64-bit seed regardless
of platform or library version. The exact algorithm and the order in which
each consumer draws values are documented in docs/formats.md; any code that
needs randomness must go through this module, never through ``random`` or
``numpy.random``.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E509) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** stream.

    The four 64-bit state words are the first four outputs of splitmix64
    seeded with ``seed`` (taken mod 2^64).
    """

    def __init__(self, seed: int):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        if not any(s):  # all-zero state is the one forbidden fixed point
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """One double in [low, high), built from the top 53 bits."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return low + (high - low) * u

    def uniforms(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        nxt = self.next_u64
        scale = high - low
        for i in range(n):
            out[i] = low + scale * ((nxt() >> 11) * 2.0**-53)
        return out

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform array filled in C order (row-major element order)."""
        size = int(np.prod(shape))
        return self.uniforms(size, low, high).reshape(shape)

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller; draws two uniforms per pair of outputs."""
        m = (n + 1) // 2
        out = np.empty(2 * m, dtype=np.float64)
        nxt = self.next_u64
        for i in range(m):
            u1 = ((nxt() >> 11) + 1) * 2.0**-53  # (0, 1], avoids log(0)
            u2 = (nxt() >> 11) * 2.0**-53
            r = math.sqrt(-2.0 * math.log(u1))
            out[2 * i] = r * math.cos(2.0 * math.pi * u2)
            out[2 * i + 1] = r * math.sin(2.0 * math.pi * u2)
        return mean + std * out[:n]

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection on the top bits."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        k = n.bit_length()
        while True:
            r = self.next_u64() >> (64 - k)
            if r < n:
                return r

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), swapping from the back."""
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle of a list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self) -> "Rng":
        """Child stream seeded from this stream's next output."""
        return Rng(self.next_u64())
