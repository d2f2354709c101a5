"""Pure-Python fallback for the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def _encode(x, y, order):
    n = 1 << order
    s = n >> 1
    d = 0
    while s > 0:
        rx = 1 if x & s else 0
        ry = 1 if y & s else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = n - 1 - x
                y = n - 1 - y
            x, y = y, x
        s >>= 1
    return d


def _decode(d, order):
    n = 1 << order
    s = 1
    x = y = 0
    t = d
    while s < n:
        rx = 1 & (t >> 1)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        x += s * rx
        y += s * ry
        t >>= 2
        s <<= 1
    return x, y


def hilbert_encode(u, v, order):
    out = np.empty(len(u), dtype=np.uint64)
    for i, (x, y) in enumerate(zip(u.tolist(), v.tolist())):
        out[i] = _encode(x, y, order)
    return out


def hilbert_decode(codes, order):
    m = len(codes)
    u = np.empty(m, dtype=np.int64)
    v = np.empty(m, dtype=np.int64)
    for i, d in enumerate(codes.tolist()):
        u[i], v[i] = _decode(d, order)
    return u, v


def matmul_rows(a, b):
    # einsum's unoptimized loop keeps a fixed per-element summation order,
    # unlike BLAS, whose kernels vary with row count and alignment.
    return np.einsum("ik,kj->ij", a, b, optimize=False)
