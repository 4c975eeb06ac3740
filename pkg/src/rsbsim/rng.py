"""Tiny deterministic PRNG shared by the reference and compiled engines.

xorshift64* is used instead of random.Random so the numba fast path can
reproduce the exact same stream with a few integer ops.
"""

from __future__ import annotations

__all__ = ["XorShift64"]

_U64 = 0xFFFFFFFFFFFFFFFF
_MULT = 0x2545F4914F6CDD1D


class XorShift64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = (seed & _U64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= (x >> 12)
        x ^= (x << 25) & _U64
        x ^= (x >> 27)
        self.state = x
        return (x * _MULT) & _U64

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return self.next_u64() % n

    def chance(self, p: float) -> bool:
        """True with probability p."""
        if p <= 0.0:
            return False
        return self.next_u64() < int(p * 2**64)
