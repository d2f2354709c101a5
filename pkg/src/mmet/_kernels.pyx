# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Hilbert coding of grid cells and batch-invariant products.

The row products accumulate every output element in a fixed k-order so that a
row's result never depends on which other rows share the call.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()


cdef inline uint64_t _encode(uint64_t x, uint64_t y, int order) nogil:
    cdef uint64_t n = (<uint64_t>1) << order
    cdef uint64_t s = n >> 1
    cdef uint64_t d = 0
    cdef uint64_t rx, ry, t
    while s > 0:
        rx = 1 if (x & s) else 0
        ry = 1 if (y & s) else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = n - 1 - x
                y = n - 1 - y
            t = x
            x = y
            y = t
        s >>= 1
    return d


cdef inline void _decode(uint64_t d, int order, uint64_t* xo, uint64_t* yo) nogil:
    cdef uint64_t n = (<uint64_t>1) << order
    cdef uint64_t s = 1
    cdef uint64_t x = 0, y = 0, rx, ry, tmp
    cdef uint64_t t = d
    while s < n:
        rx = 1 & (t >> 1)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            tmp = x
            x = y
            y = tmp
        x += s * rx
        y += s * ry
        t >>= 2
        s <<= 1
    xo[0] = x
    yo[0] = y


def hilbert_encode(const int64_t[::1] u, const int64_t[::1] v, int order):
    cdef Py_ssize_t i, m = u.shape[0]
    out = np.empty(m, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(m):
            o[i] = _encode(<uint64_t>u[i], <uint64_t>v[i], order)
    return out


def hilbert_decode(const uint64_t[::1] codes, int order):
    cdef Py_ssize_t i, m = codes.shape[0]
    u = np.empty(m, dtype=np.int64)
    v = np.empty(m, dtype=np.int64)
    cdef int64_t[::1] uo = u
    cdef int64_t[::1] vo = v
    cdef uint64_t x, y
    with nogil:
        for i in range(m):
            _decode(codes[i], order, &x, &y)
            uo[i] = <int64_t>x
            vo[i] = <int64_t>y
    return u, v


ctypedef fused real:
    float
    double


cdef void _rows(const real* a, const real* b, real* c,
                Py_ssize_t m, Py_ssize_t kk, Py_ssize_t n) noexcept nogil:
    # Register tile of 4 rows x 4 columns; every element still sums over k in
    # ascending order with one multiply and one add per term.
    cdef Py_ssize_t i, j, k, t, jw
    cdef real acc0[4]
    cdef real acc1[4]
    cdef real acc2[4]
    cdef real acc3[4]
    cdef real a0, a1, a2, a3
    cdef const real* brow
    i = 0
    while i + 4 <= m:
        j = 0
        while j < n:
            jw = n - j if n - j < 4 else 4
            for t in range(4):
                acc0[t] = 0
                acc1[t] = 0
                acc2[t] = 0
                acc3[t] = 0
            if jw == 4:
                for k in range(kk):
                    brow = b + k * n + j
                    a0 = a[i * kk + k]
                    a1 = a[(i + 1) * kk + k]
                    a2 = a[(i + 2) * kk + k]
                    a3 = a[(i + 3) * kk + k]
                    for t in range(4):
                        acc0[t] = acc0[t] + a0 * brow[t]
                        acc1[t] = acc1[t] + a1 * brow[t]
                        acc2[t] = acc2[t] + a2 * brow[t]
                        acc3[t] = acc3[t] + a3 * brow[t]
            else:
                for k in range(kk):
                    brow = b + k * n + j
                    a0 = a[i * kk + k]
                    a1 = a[(i + 1) * kk + k]
                    a2 = a[(i + 2) * kk + k]
                    a3 = a[(i + 3) * kk + k]
                    for t in range(jw):
                        acc0[t] = acc0[t] + a0 * brow[t]
                        acc1[t] = acc1[t] + a1 * brow[t]
                        acc2[t] = acc2[t] + a2 * brow[t]
                        acc3[t] = acc3[t] + a3 * brow[t]
            for t in range(jw):
                c[i * n + j + t] = acc0[t]
                c[(i + 1) * n + j + t] = acc1[t]
                c[(i + 2) * n + j + t] = acc2[t]
                c[(i + 3) * n + j + t] = acc3[t]
            j += 4
        i += 4
    while i < m:
        j = 0
        while j < n:
            jw = n - j if n - j < 4 else 4
            for t in range(4):
                acc0[t] = 0
            for k in range(kk):
                brow = b + k * n + j
                a0 = a[i * kk + k]
                for t in range(jw):
                    acc0[t] = acc0[t] + a0 * brow[t]
            for t in range(jw):
                c[i * n + j + t] = acc0[t]
            j += 4
        i += 1


cdef void _call_rows(real[:, ::1] a, real[:, ::1] b, real[:, ::1] c) noexcept nogil:
    if a.shape[0] == 0 or b.shape[1] == 0:
        return
    _rows(&a[0, 0], &b[0, 0], &c[0, 0], a.shape[0], a.shape[1], b.shape[1])


def matmul_rows(a, b):
    """Deterministic ``a @ b`` for 2-D operands of a shared float dtype."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.shape[1] == 0:
        out[...] = 0
        return out
    if a.dtype == np.float64:
        _call_rows[double](a, b, out)
    else:
        _call_rows[float](a, b, out)
    return out
