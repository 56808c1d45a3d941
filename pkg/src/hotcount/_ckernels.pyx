# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sketch kernels. Bit-identical to ``hotcount._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libc.string cimport memcpy

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t FP_SEED = 0x2545F4914F6CDD1DULL
cdef uint64_t M1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t M2 = 0x94D049BB133111EBULL

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


cdef inline uint64_t _mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


cdef inline uint64_t _fingerprint(const unsigned char* data, Py_ssize_t n) noexcept nogil:
    cdef uint64_t h = _mix64(<uint64_t>n ^ FP_SEED)
    cdef uint64_t chunk
    cdef Py_ssize_t off = 0, i, take
    while off < n:
        chunk = 0
        take = n - off
        if take > 8:
            take = 8
        for i in range(take):
            chunk |= (<uint64_t>data[off + i]) << (8 * i)
        h = _mix64((h ^ chunk) + GOLDEN)
        off += 8
    return h


def mix64(uint64_t z):
    return _mix64(z)


def fingerprint(bytes key):
    return _fingerprint(<const unsigned char*>key, len(key))


def fingerprints(keys):
    cdef Py_ssize_t n = len(keys), j
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(n, dtype=np.uint64)
    cdef bytes k
    for j in range(n):
        k = keys[j]
        out[j] = _fingerprint(<const unsigned char*>k, len(k))
    return out


def locate_many(fps, row_seeds, sign_seeds, Py_ssize_t width, bint signed):
    cdef const uint64_t[::1] f = np.ascontiguousarray(fps, dtype=np.uint64)
    cdef const uint64_t[::1] rs = np.ascontiguousarray(row_seeds, dtype=np.uint64)
    cdef const uint64_t[::1] ss = np.ascontiguousarray(sign_seeds, dtype=np.uint64)
    cdef Py_ssize_t n = f.shape[0], depth = rs.shape[0], j, i
    cdef uint64_t mask = <uint64_t>(width - 1)
    cols_arr = np.empty((n, depth), dtype=np.int64)
    signs_arr = np.ones((n, depth), dtype=np.float64)
    cdef int64_t[:, ::1] cols = cols_arr
    cdef double[:, ::1] signs = signs_arr
    for j in range(n):
        for i in range(depth):
            cols[j, i] = <int64_t>((_mix64(f[j] ^ rs[i]) >> 32) & mask)
            if signed and (__builtin_popcountll(_mix64(f[j] ^ ss[i])) & 1):
                signs[j, i] = -1.0
    return cols_arr, signs_arr


def update_many(double[:, ::1] cells, row_seeds, sign_seeds, keys, deltas, bint signed):
    cdef const uint64_t[::1] rs = np.ascontiguousarray(row_seeds, dtype=np.uint64)
    cdef const uint64_t[::1] ss = np.ascontiguousarray(sign_seeds, dtype=np.uint64)
    cdef const double[::1] d = np.ascontiguousarray(deltas, dtype=np.float64)
    cdef Py_ssize_t n = len(keys), depth = cells.shape[0], j, i
    cdef uint64_t mask = <uint64_t>(cells.shape[1] - 1)
    cdef uint64_t fp
    cdef double s
    cdef bytes k
    for j in range(n):
        k = keys[j]
        fp = _fingerprint(<const unsigned char*>k, len(k))
        for i in range(depth):
            s = 1.0
            if signed and (__builtin_popcountll(_mix64(fp ^ ss[i])) & 1):
                s = -1.0
            cells[i, (_mix64(fp ^ rs[i]) >> 32) & mask] += s * d[j]


cdef inline void _insertion_sort(double* v, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t a, b
    cdef double x
    for a in range(1, n):
        x = v[a]
        b = a - 1
        while b >= 0 and v[b] > x:
            v[b + 1] = v[b]
            b -= 1
        v[b + 1] = x


def estimate_many(const double[:, ::1] cells, row_seeds, sign_seeds, keys, bint signed):
    cdef const uint64_t[::1] rs = np.ascontiguousarray(row_seeds, dtype=np.uint64)
    cdef const uint64_t[::1] ss = np.ascontiguousarray(sign_seeds, dtype=np.uint64)
    cdef Py_ssize_t n = len(keys), depth = cells.shape[0], j, i
    cdef uint64_t mask = <uint64_t>(cells.shape[1] - 1)
    cdef uint64_t fp
    cdef double v, best
    cdef bytes k
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    scratch_arr = np.empty(depth, dtype=np.float64)
    cdef double[::1] scratch = scratch_arr
    for j in range(n):
        k = keys[j]
        fp = _fingerprint(<const unsigned char*>k, len(k))
        if not signed:
            best = cells[0, (_mix64(fp ^ rs[0]) >> 32) & mask]
            for i in range(1, depth):
                v = cells[i, (_mix64(fp ^ rs[i]) >> 32) & mask]
                if v < best:
                    best = v
            out[j] = best
        else:
            for i in range(depth):
                v = cells[i, (_mix64(fp ^ rs[i]) >> 32) & mask]
                if __builtin_popcountll(_mix64(fp ^ ss[i])) & 1:
                    v = -v
                scratch[i] = v
            _insertion_sort(&scratch[0], depth)
            out[j] = scratch[depth // 2]
    return out_arr
