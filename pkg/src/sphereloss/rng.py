"""Counter-based, splittable 64-bit random stream.

Every draw is ``splitmix64(key + (counter + 1) * GOLDEN)`` where ``key`` is
derived from the seed and a path of stream ids.  The constants are the
published SplitMix64 ones, so any implementation can reproduce the streams
bit for bit:

* ``GOLDEN = 0x9E3779B97F4A7C15``
* mix multipliers ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``
* shifts 30, 27, 31

Uniforms use the top 53 bits; normals use Box-Muller on consecutive uniform
pairs ``(u1, u2)`` with ``r = sqrt(-2 log(1 - u1))`` and angle ``2 pi u2``.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def _stream_id(sid) -> int:
    if isinstance(sid, str):
        return zlib.crc32(sid.encode("utf-8"))
    return int(sid) & MASK64


class CounterRNG:
    """Deterministic stream keyed by ``(seed, *path)``.

    ``spawn`` derives an independent child stream, so draws can be indexed by
    e.g. ``(seed, class, sample)`` instead of by draw order.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & MASK64
        self.path = tuple(path)
        key = mix64(self.seed)
        for sid in self.path:
            key = mix64(key ^ ((_stream_id(sid) * GOLDEN) & MASK64))
        self.key = key
        self.counter = 0

    def spawn(self, *ids) -> "CounterRNG":
        return CounterRNG(self.seed, self.path + ids)

    def uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
            return _mix64_array(z)

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape)

    def integers_below(self, bounds) -> list[int]:
        """One unbiased-enough integer in ``[0, b)`` per bound (multiply-shift)."""
        bounds = [int(b) for b in bounds]
        raw = self.uint64(len(bounds)) >> np.uint64(11)
        return [(int(r) * b) >> 53 for r, b in zip(raw, bounds)]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        out = list(range(n))
        if n < 2:
            return np.array(out, dtype=np.int64)
        js = self.integers_below(range(n, 1, -1))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = js[k]
            out[i], out[j] = out[j], out[i]
        return np.array(out, dtype=np.int64)
