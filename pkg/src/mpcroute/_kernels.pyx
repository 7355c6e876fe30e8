# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Native ring kernels.  Unsigned C arithmetic wraps mod 2**64 for free."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()


def beaver_mac(const uint64_t[:, :, ::1] eps, const uint64_t[:, :, ::1] delta,
               const uint64_t[:, :, ::1] a, const uint64_t[:, :, ::1] b,
               const uint64_t[:, :, ::1] c, bint party0, uint64_t mask):
    cdef Py_ssize_t n = eps.shape[0], d = eps.shape[1], m = eps.shape[2]
    cdef Py_ssize_t i, j, l
    out = np.zeros((n, m), dtype=np.uint64)
    cdef uint64_t[:, ::1] o = out
    cdef uint64_t e, t
    with nogil:
        for i in range(n):
            for j in range(d):
                for l in range(m):
                    e = eps[i, j, l]
                    t = c[i, j, l] + e * b[i, j, l] + delta[i, j, l] * a[i, j, l]
                    if party0:
                        t = t + e * delta[i, j, l]
                    o[i, l] += t
        if mask != <uint64_t>0xFFFFFFFFFFFFFFFF:
            for i in range(n):
                for l in range(m):
                    o[i, l] &= mask
    return out


def beaver_combine(const uint64_t[::1] eps, const uint64_t[::1] delta,
                   const uint64_t[::1] a, const uint64_t[::1] b,
                   const uint64_t[::1] c, bint party0, uint64_t mask):
    cdef Py_ssize_t n = eps.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t t
    with nogil:
        for i in range(n):
            t = c[i] + eps[i] * b[i] + delta[i] * a[i]
            if party0:
                t = t + eps[i] * delta[i]
            o[i] = t & mask
    return out


def ring_matmul(const uint64_t[:, ::1] x, const uint64_t[:, ::1] w, uint64_t mask):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], m = w.shape[1]
    cdef Py_ssize_t i, j, l
    out = np.zeros((n, m), dtype=np.uint64)
    cdef uint64_t[:, ::1] o = out
    cdef uint64_t xv
    with nogil:
        for i in range(n):
            for j in range(d):
                xv = x[i, j]
                for l in range(m):
                    o[i, l] += xv * w[j, l]
            for l in range(m):
                o[i, l] &= mask
    return out
