# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: xoshiro256++ stream fill, FNV-1a hashing, cyclic Jacobi.

Every routine here has a bit-identical twin in ``_fallback.py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from libc.stdint cimport uint64_t, uint8_t

cnp.import_array()


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(cnp.uint64_t[:, ::1] states, Py_ssize_t n):
    """Advance each row of ``states`` ``n`` times; returns (lanes, n) uint64 outputs."""
    cdef Py_ssize_t lanes = states.shape[0]
    out = np.empty((lanes, n), dtype=np.uint64)
    cdef cnp.uint64_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef uint64_t s0, s1, s2, s3, t
    with nogil:
        for i in range(lanes):
            s0 = states[i, 0]
            s1 = states[i, 1]
            s2 = states[i, 2]
            s3 = states[i, 3]
            for j in range(n):
                o[i, j] = _rotl(s0 + s3, 23) + s0
                t = s1 << 17
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = _rotl(s3, 45)
            states[i, 0] = s0
            states[i, 1] = s1
            states[i, 2] = s2
            states[i, 3] = s3
    return out


def fnv1a64(bytes data, uint64_t seed):
    cdef uint64_t h = 0xcbf29ce484222325ULL ^ seed
    cdef const uint8_t[:] view = data
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        h ^= view[i]
        h *= 0x100000001b3ULL
    return h


def jacobi_eig(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """In-place cyclic Jacobi; ``a`` ends (near) diagonal, ``v`` accumulates rotations.

    Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef double off, apq, theta, t, c, s, x, y
    cdef int sweep = 0
    with nogil:
        while sweep < max_sweeps:
            off = 0.0
            for p in range(n):
                for q in range(n):
                    if p != q:
                        off += a[p, q] * a[p, q]
            if sqrt(off) < tol:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        x = a[k, p]
                        y = a[k, q]
                        a[k, p] = c * x - s * y
                        a[k, q] = s * x + c * y
                    for k in range(n):
                        x = a[p, k]
                        y = a[q, k]
                        a[p, k] = c * x - s * y
                        a[q, k] = s * x + c * y
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        x = v[k, p]
                        y = v[k, q]
                        v[k, p] = c * x - s * y
                        v[k, q] = s * x + c * y
            sweep += 1
    return sweep
