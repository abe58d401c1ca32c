"""Pure-Python/numpy twins of the routines in ``_kernels.pyx``.

Outputs are bit-identical to the compiled versions; they are only slower.
"""
import math

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def xoshiro_fill(states, n):
    """Vectorised over lanes; the per-lane sequence is inherently serial."""
    lanes = states.shape[0]
    out = np.empty((lanes, n), dtype=np.uint64)
    s0, s1, s2, s3 = (states[:, i].copy() for i in range(4))
    sh17 = np.uint64(17)
    with np.errstate(over="ignore"):
        for j in range(n):
            out[:, j] = _rotl(s0 + s3, 23) + s0
            t = s1 << sh17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    states[:, 0], states[:, 1], states[:, 2], states[:, 3] = s0, s1, s2, s3
    return out


def fnv1a64(data, seed):
    h = _FNV_OFFSET ^ seed
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK
    return h


def jacobi_eig(a, v, tol, max_sweeps):
    n = a.shape[0]
    sweep = 0
    while sweep < max_sweeps:
        off = 0.0
        rows = a.tolist()
        for p in range(n):
            row = rows[p]
            for q in range(n):
                if p != q:
                    off += row[q] * row[q]
        if math.sqrt(off) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                x = a[:, p].copy()
                y = a[:, q].copy()
                a[:, p] = c * x - s * y
                a[:, q] = s * x + c * y
                x = a[p, :].copy()
                y = a[q, :].copy()
                a[p, :] = c * x - s * y
                a[q, :] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                x = v[:, p].copy()
                y = v[:, q].copy()
                v[:, p] = c * x - s * y
                v[:, q] = s * x + c * y
        sweep += 1
    return sweep
