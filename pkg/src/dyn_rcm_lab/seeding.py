"""Counter-based seed derivation.

A :class:`RandomSeed` is a 64-bit master value plus a path of integer
indices (experiment -> replica -> sub-stream).  The path is folded into a
single 64-bit stream key with the SplitMix64 finaliser, and that key drives a
Philox counter-based generator.  Nothing depends on call order, so replicas
can be evaluated in any order or in parallel.

Mixing rule, for each index ``i`` in the path::

    key <- mix64(key ^ mix64(i + GOLDEN))

with ``key`` initialised to ``mix64(master)``.  ``mix64`` is a bijection of
64-bit words, so for a fixed prefix the map ``i -> key`` is injective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = (z + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorised :func:`mix64` over a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RandomSeed:
    master: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.master <= MASK64:
            raise ValueError(f"master seed must be a 64-bit unsigned integer, got {self.master}")
        if any(i < 0 for i in self.path):
            raise ValueError("stream path indices must be non-negative")

    @property
    def key(self) -> int:
        k = mix64(self.master)
        for i in self.path:
            k = mix64(k ^ mix64((i + GOLDEN) & MASK64))
        return k

    def derive(self, index: int) -> "RandomSeed":
        return derive_seed(self, index)

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key))

    def to_json(self) -> dict:
        return {"master": self.master, "path": list(self.path)}


def derive_seed(seed: RandomSeed, index: int) -> RandomSeed:
    if index < 0:
        raise ValueError("index must be >= 0")
    return RandomSeed(seed.master, seed.path + (int(index),))


def as_seed(seed) -> RandomSeed:
    """Accept a RandomSeed or a bare integer master."""
    if isinstance(seed, RandomSeed):
        return seed
    return RandomSeed(int(seed))


def derived_keys(masters: np.ndarray, index: int) -> np.ndarray:
    """Stream keys of ``derive_seed(RandomSeed(m), index)`` for many masters at once."""
    k = mix64_array(np.asarray(masters, dtype=np.uint64))
    with np.errstate(over="ignore"):
        step = mix64_array(np.array([(index + GOLDEN) & MASK64], dtype=np.uint64))[0]
    return mix64_array(k ^ step)
