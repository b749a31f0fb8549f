"""Deterministic random streams built on the Philox counter-based generator.

The same (seed, path) pair yields the same sample stream on every platform.
Child streams mix an integer tag into the path with a splitmix64 step, so any
module can carve out an independent, reproducible stream without coordination.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(path: int, tag: int) -> int:
    h = (path + _GOLDEN + tag) & _MASK
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & _MASK
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & _MASK
    h ^= h >> 31
    return h


def _tag_value(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    if isinstance(tag, str):
        data = tag.encode()
        h = len(data) & _MASK
        for i in range(0, len(data), 8):
            h = _mix(h, int.from_bytes(data[i : i + 8], "little"))
        return h
    raise TypeError(f"rng tags must be int or str, got {type(tag).__name__}")


class Rng:
    """A Philox-keyed generator addressed by (seed, derivation path)."""

    def __init__(self, seed: int, _path: int = 0):
        self.seed = int(seed) & _MASK
        self.path = int(_path) & _MASK
        key = np.array([self.seed, self.path], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *tags) -> "Rng":
        """An independent stream addressed by this path extended with tags.

        Tags are integers or strings; strings fold their raw bytes through
        the same mixer, so the derivation never depends on Python's
        randomized hash.
        """
        path = self.path
        for tag in tags:
            path = _mix(path, _tag_value(tag))
        return Rng(self.seed, path)

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high=None, shape=None):
        out = self._gen.integers(low, high, size=shape)
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
