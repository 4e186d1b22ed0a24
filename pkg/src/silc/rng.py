"""Counter-based splitmix64 randomness.

Every random draw in the project (dataset scenes, crop rectangles, weight
init, batch order) flows from `Stream`, a counter-mode splitmix64 generator:
draw ``i`` of a stream seeded with ``s`` is ``mix64(s + (i + 1) * GOLDEN)``,
all in wrapping uint64 arithmetic, so sequences are bit-identical across
platforms.  The exact bit-level definition is written out in
docs/formats.md.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

# 53-bit mantissa step used to map uint64 draws onto floats.
_INV_2_53 = float(2.0**-53)


def mix64(z: np.ndarray) -> np.ndarray:
    """Finalizer of splitmix64; input and output are uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX_A
        z = (z ^ (z >> np.uint64(27))) * _MIX_B
        return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


def derive(seed: int, *tags: int | str) -> int:
    """Derive a child seed from a root seed and a tag path.

    Tags are mixed one at a time: strings are FNV-1a hashed first, ints are
    used directly.  Used as ``derive(run_seed, "crops", step, slot)`` so all
    randomness is a pure function of the run seed.
    """
    h = mix64(np.asarray(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
    for tag in tags:
        if isinstance(tag, str):
            x = _fnv1a(tag.encode("utf-8"))
        else:
            x = np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            h = mix64((h + GOLDEN) ^ mix64(np.asarray(x, dtype=np.uint64)))
    return int(h)


class Stream:
    """Sequential view over the counter-mode generator.

    The stream only remembers how many values were consumed; each draw is an
    independent function of (seed, counter).
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return mix64(self._seed + idx * GOLDEN)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform floats in [lo, hi) from the top 53 bits of each draw."""
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return lo + u * (hi - lo)

    def uniform_open(self, n: int) -> np.ndarray:
        """Uniform floats in (0, 1); safe as log/Box-Muller input."""
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64)
        return (u + 0.5) * _INV_2_53

    def randint(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound)."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (pairs drawn, cos branch only)."""
        u1 = self.uniform_open(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def trunc_normal(self, n: int, std: float, limit: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to +-limit standard deviations."""
        out = np.empty(n, dtype=np.float64)
        have = 0
        while have < n:
            z = self.normal(max(n - have, 16) * 2)
            z = z[np.abs(z) <= limit]
            take = min(z.size, n - have)
            out[have : have + take] = z[:take]
            have += take
        return out * std
