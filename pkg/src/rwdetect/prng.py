"""Seedable splitmix64 streams for reproducible corpus generation.

The generator is fully specified here so corpora can be reproduced
bit-for-bit by any implementation:

    state' = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state'
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z XOR (z >> 31)

Independent streams are derived from a root seed plus integer path words
(e.g. one stream per report index) by folding each word into the state
with one splitmix step, which keeps streams decorrelated regardless of
write order.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic 64-bit stream with uniform helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) (bound <= 2^32 keeps bias negligible)."""
        return self.next_u64() % bound


def derive_stream(seed: int, *path: int) -> SplitMix64:
    """Derive an independent stream from a root seed and integer path words."""
    state = seed & _MASK64
    for word in path:
        state = _mix((state + _GAMMA) & _MASK64) ^ ((word * _GAMMA) & _MASK64)
    return SplitMix64(state)
