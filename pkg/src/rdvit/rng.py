"""Deterministic random streams.

Every stochastic choice in the package (init, dropout, data synthesis,
shuffling, augmentation) draws from an RngState. Streams are backed by the
counter-based Philox4x64-10 generator as implemented by numpy.random.Philox,
so a given seed yields a bit-identical stream on every platform and every
run. Sub-streams are derived with a splitmix64 hash of the parent seed and a
tag, which keeps independent consumers (e.g. per-epoch shuffling vs. dropout)
decoupled: adding draws to one stream never shifts another.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy import special as _special

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


def derive_seed(seed: int, *tags) -> int:
    """Mix a parent seed with tags into a new 64-bit seed."""
    out = int(seed) & _MASK64
    for tag in tags:
        out = _splitmix64(out ^ _tag_to_int(tag))
    return out


class RngState:
    """A named, reproducible random stream.

    Draws are always generated in float64 and cast afterwards, so the stream
    contents do not depend on the global precision mode.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, *tags) -> "RngState":
        """Independent child stream; same tags always give the same child."""
        return RngState(derive_seed(self.seed, *tags))

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std + mean

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.random(shape) * (high - low) + low

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        # Inverse-CDF sampling of a normal truncated at +-bound standard
        # deviations: a single pass, no rejection loop.
        lo = _special.ndtr(-bound)
        hi = _special.ndtr(bound)
        u = self._gen.random(shape) * (hi - lo) + lo
        return _special.ndtri(u) * std
