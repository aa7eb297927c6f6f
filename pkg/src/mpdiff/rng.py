"""Counter-based random streams.

A stream is addressed by ``(seed, stream_id)``; both are 64-bit integers
packed into a Philox key, so two streams never share state and the same
address reproduces the same draws on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, *path: int | str) -> "Rng":
        """Independent stream derived from this one's address and ``path``."""
        return Rng(self.seed, derive_stream(self.stream, *path))

    def normal(self, size=None, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def derive_stream(base: int, *path: int | str) -> int:
    """Stable 64-bit stream id from a base id and a path of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(base & _MASK64).to_bytes(8, "little"))
    for p in path:
        h.update(b"\x00" + str(p).encode())
    return int.from_bytes(h.digest(), "little")
