"""Philox4x32-10 counter-based generator.

State transitions use only 32/64-bit integer arithmetic, so a given
(seed, stream) yields the same stream on every platform. Blocks are
generated vectorized over counters.
"""
import zlib

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counters, key, rounds=10):
    """Philox4x32 bijection.

    ``counters`` is a ``(n, 4)`` array of 32-bit words, ``key`` a pair of
    32-bit ints. Returns an ``(n, 4)`` uint64 array holding 32-bit outputs.
    """
    c = np.asarray(counters, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
    return np.stack([c0, c1, c2, c3], axis=1)


class Rng:
    """Seeded stream of random draws.

    The 64-bit seed is the Philox key; words 2-3 of the counter carry a
    stream id so independent substreams come from :meth:`spawn`.
    """

    def __init__(self, seed=0, stream=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0
        self._key = (self.seed & 0xFFFFFFFF, self.seed >> 32)

    def spawn(self, name):
        """Independent generator for a named purpose (same seed, new stream)."""
        salt = zlib.crc32(str(name).encode("utf-8"))
        stream = (self.stream * 0x100000001B3 + salt + 1) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, stream)

    def random_raw(self, n):
        """``n`` 32-bit outputs as uint64."""
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        blocks = (n + 3) // 4
        idx = np.arange(self._counter, self._counter + blocks, dtype=np.uint64)
        ctr = np.empty((blocks, 4), dtype=np.uint64)
        ctr[:, 0] = idx & _MASK32
        ctr[:, 1] = idx >> _SHIFT32
        ctr[:, 2] = np.uint64(self.stream & 0xFFFFFFFF)
        ctr[:, 3] = np.uint64(self.stream >> 32)
        self._counter += blocks
        return philox4x32(ctr, self._key).reshape(-1)[:n]

    def uniform(self, low=0.0, high=1.0, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        raw = self.random_raw(2 * n).reshape(n, 2)
        u = ((raw[:, 0] >> np.uint64(5)).astype(np.float64) * 67108864.0
             + (raw[:, 1] >> np.uint64(6)).astype(np.float64)) / 9007199254740992.0
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, loc=0.0, scale=1.0, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self.uniform(size=n)  # (0, 1]
        u2 = self.uniform(size=n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        out = loc + scale * z
        return out.reshape(shape) if shape else float(out[0])

    def truncated_normal(self, std=1.0, size=None, bound=2.0):
        """Normal draws restricted to ``[-bound*std, bound*std]`` by resampling."""
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape, dtype=np.int64))
        z = self.normal(size=n)
        bad = np.flatnonzero(np.abs(z) > bound)
        while bad.size:
            z[bad] = self.normal(size=bad.size)
            bad = bad[np.abs(z[bad]) > bound]
        out = std * z
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, low, high=None, size=None):
        if high is None:
            low, high = 0, low
        if high <= low:
            raise ValueError("integers: empty range")
        u = self.uniform(size=size)
        out = np.floor(low + (high - low) * np.asarray(u)).astype(np.int64)
        out = np.minimum(out, high - 1)
        return out if size is not None else int(out)

    def permutation(self, n):
        return np.argsort(self.uniform(size=n), kind="stable")

    def bernoulli(self, p, size=None):
        u = self.uniform(size=size)
        return np.asarray(u) < p if size is not None else u < p
