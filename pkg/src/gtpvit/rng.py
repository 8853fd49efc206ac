"""SplitMix64 generator: the single source of randomness in the engine.

Every fixture, synthetic image and random selection flows from one 64-bit
seed through this generator, so runs are reproducible bit-for-bit across
platforms. Named substreams keep independent consumers (weight generation,
random token selection, ...) from perturbing each other's draws.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream ids for the engine's independent randomness consumers.
STREAM_WEIGHTS = 1
STREAM_IMAGE = 2
STREAM_SELECT = 3


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * _MIX1 & _MASK
    z = (z ^ (z >> 27)) * _MIX2 & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Scalar SplitMix64 stream over unsigned 64-bit integers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def fill_uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Vectorized draw of `n` uniforms, identical to `n` scalar calls.

        SplitMix64 states form an arithmetic progression, so the whole
        block is computed with numpy uint64 ops and the stream position
        advanced by `n`.
        """
        if n < 0:
            raise ValueError("n must be >= 0")
        start = self._state
        self._state = (self._state + n * _GOLDEN) & _MASK
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = (np.uint64(start) + steps * np.uint64(_GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u


def substream(seed: int, stream_id: int) -> SplitMix64:
    """Derive an independent stream from (seed, stream_id)."""
    return SplitMix64(_mix((seed ^ _mix(stream_id & _MASK)) & _MASK))
