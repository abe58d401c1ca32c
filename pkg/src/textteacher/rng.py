"""Seeded randomness: splitmix64-seeded xoshiro256++.

All stochastic code in the package draws from :class:`Rng`; there is no ambient
random state. Integer streams come from the kernel backend, float conversion
happens here in numpy so both backends give the same bits.

Constants:
    splitmix64 increment 0x9E3779B97F4A7C15, multipliers 0xBF58476D1CE4E5B9 and
    0x94D049BB133111EB; xoshiro256++ rotations 23/45, shift 17;
    doubles are ``(x >> 11) * 2**-53``.
"""
import math

import numpy as np

from .kernels import xoshiro_fill

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """Return ``(next_state, output)`` for one splitmix64 step."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def seed_state(seed):
    x = int(seed) & _MASK
    words = []
    for _ in range(4):
        x, out = splitmix64(x)
        words.append(out)
    return np.array(words, dtype=np.uint64)


def derive_seed(seed, *keys):
    """Mix integer keys into a seed (used for independent per-purpose streams)."""
    x = int(seed) & _MASK
    for k in keys:
        x, out = splitmix64(x ^ (int(k) & _MASK))
        x = out
    return x


def _to_unit(u):
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _box_muller(u1, u2):
    # u1 in (0, 1] avoids log(0)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    return r * np.cos(2.0 * math.pi * u2)


class Rng:
    """A single xoshiro256++ stream."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._state = seed_state(seed).reshape(1, 4)

    def raw(self, n):
        return xoshiro_fill(self._state, int(n))[0]

    def uniform(self, size=()):
        n = int(np.prod(size, dtype=np.int64)) if size != () else 1
        out = _to_unit(self.raw(n))
        return out.reshape(size) if size != () else float(out[0])

    def normal(self, size, std=1.0):
        size = tuple(np.atleast_1d(size)) if not isinstance(size, tuple) else size
        n = int(np.prod(size, dtype=np.int64))
        u = _to_unit(self.raw(2 * n))
        return (std * _box_muller(u[0::2], u[1::2])).reshape(size)

    def trunc_normal(self, size, std=1.0, bound=2.0):
        """Normal samples redrawn until they fall inside ``±bound·std``."""
        z = self.normal(size).ravel()
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(z) > bound
        return (std * z).reshape(size)

    def integers(self, high, size):
        """Uniform integers in ``[0, high)`` (multiply-shift on 53-bit doubles)."""
        n = int(np.prod(size, dtype=np.int64))
        idx = np.floor(_to_unit(self.raw(n)) * high).astype(np.int64)
        return idx.reshape(size)

    def permutation(self, n):
        keys = self.raw(int(n))
        return np.argsort(keys, kind="stable")


def lane_streams(seed, lanes):
    """Independent per-lane states, lane ``i`` seeded by ``derive_seed(seed, i)``."""
    return np.stack([seed_state(derive_seed(seed, i)) for i in range(lanes)])


def lane_normals(states, n):
    """Standard normals, ``n`` per lane, advancing ``states`` in place."""
    u = _to_unit(xoshiro_fill(states, 2 * n))
    return _box_muller(u[:, 0::2], u[:, 1::2])


def lane_uniforms(states, n):
    return _to_unit(xoshiro_fill(states, n))
