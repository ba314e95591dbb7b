"""Seeded random streams and parameter initialisers.

All randomness comes from numpy's Philox counter-based generator. A run
derives every stream from one top-level seed plus a stream name, so adding
a new consumer never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np

from gsa.tensor import Tensor


class Rng:
    """Counter-based random stream (Philox-4x64) keyed by ``(seed, stream name)``."""

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        key = zlib.crc32(stream.encode("utf-8"))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, key])))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def normal(self, size, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(dtype)

    def uniform(self, low: float, high: float, size=None, dtype=np.float64):
        """A float when ``size`` is None, else an array."""
        if size is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def init_matrix(rows: int, cols: int, scheme: str, rng: Rng, std: float = 0.02,
                dtype=np.float32, fan: int | None = None) -> Tensor:
    """Trainable ``rows x cols`` parameter.

    ``scheme`` is ``zeros``, ``normal`` (fixed ``std``) or ``scaled-normal``
    (``std / sqrt(fan)``, with ``fan`` defaulting to ``rows``).
    """
    if rows <= 0 or cols <= 0:
        raise ValueError(f"matrix dims must be positive, got {rows}x{cols}")
    if scheme == "zeros":
        data = np.zeros((rows, cols), dtype=dtype)
    elif scheme == "normal":
        data = rng.normal((rows, cols), std, dtype)
    elif scheme == "scaled-normal":
        data = rng.normal((rows, cols), std / np.sqrt(fan or rows), dtype)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True, dtype=dtype)
