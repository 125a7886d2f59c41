"""Seeded, portable random number generation.

The whole engine is required to be bit-reproducible from a single 64-bit
seed, so we do not rely on any library generator whose stream may change
between versions. The generator is xoshiro256++ (Blackman & Vigna, public
domain) seeded through splitmix64, with Box-Muller for Gaussian draws.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = 2.0 ** -53


def _splitmix64_stream(seed: int, count: int) -> list[int]:
    """First `count` outputs of splitmix64 for the given seed."""
    x = seed & _MASK64
    out = []
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


class SeededRng:
    """xoshiro256++ stream with Box-Muller Gaussians.

    Identical seeds give identical streams, bit-exact across runs. An
    instance is a single sequential stream: it must not be shared across
    threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        s = _splitmix64_stream(self.seed, 4)
        if not any(s):  # all-zero state is the one forbidden xoshiro state
            s[0] = 0x9E3779B97F4A7C15
        self._s = tuple(s)
        self._spare_normal: float | None = None

    def _next_block(self, n: int) -> list[int]:
        """Advance the stream by n raw 64-bit outputs."""
        s0, s1, s2, s3 = self._s
        out = [0] * n
        for i in range(n):
            r = (s0 + s3) & _MASK64
            out[i] = (((r << 23) | (r >> 41)) + s0) & _MASK64
            t = (s1 << 17) & _MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = (s0, s1, s2, s3)
        return out

    def next_u64(self) -> int:
        return self._next_block(1)[0]

    def uniform(self) -> float:
        """One double in (0, 1]."""
        return ((self.next_u64() >> 11) + 1) * _INV_2_53

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for small n."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.next_u64() % n

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard-normal draws; scalar when shape is None.

        Box-Muller pairs are consumed in order and a spare half-pair is
        cached, so the mapping from seed to sample stream does not depend
        on how draws are batched.
        """
        if shape is None:
            return float(self._normal_flat(1)[0])
        count = int(np.prod(shape))
        return self._normal_flat(count).reshape(shape)

    def _normal_flat(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        start = 0
        if self._spare_normal is not None and count > 0:
            out[0] = self._spare_normal
            self._spare_normal = None
            start = 1
        remaining = count - start
        if remaining <= 0:
            return out
        pairs = (remaining + 1) // 2
        raw = np.array(self._next_block(2 * pairs), dtype=np.uint64)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = ((raw[1::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * math.pi) * u2
        z0 = radius * np.cos(angle)
        z1 = radius * np.sin(angle)
        interleaved = np.empty(2 * pairs, dtype=np.float64)
        interleaved[0::2] = z0
        interleaved[1::2] = z1
        out[start:] = interleaved[:remaining]
        if 2 * pairs > remaining:
            self._spare_normal = float(interleaved[remaining])
        return out
