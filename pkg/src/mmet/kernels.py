"""Hot kernels, compiled when the extension is built and pure Python otherwise.

Set ``MMET_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("MMET_PURE_PYTHON"):
    _impl = _kernels_py
    COMPILED = False
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        _impl = _kernels_py
        COMPILED = False


def hilbert_encode(u, v, order: int) -> np.ndarray:
    """Hilbert codes (uint64) of integer grid cells ``(u[i], v[i])``."""
    u = np.ascontiguousarray(u, dtype=np.int64)
    v = np.ascontiguousarray(v, dtype=np.int64)
    return _impl.hilbert_encode(u, v, order)


def hilbert_decode(codes, order: int) -> tuple[np.ndarray, np.ndarray]:
    codes = np.ascontiguousarray(codes, dtype=np.uint64)
    return _impl.hilbert_decode(codes, order)


def matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where each output row depends only on its own input row.

    Leading batch axes of ``a`` are flattened; a batched ``b`` (same leading
    axes as ``a``) is handled one slice at a time.
    """
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if b.ndim == 2:
        flat = a.reshape(-1, a.shape[-1])
        return _impl.matmul_rows(flat, b).reshape(a.shape[:-1] + (b.shape[-1],))
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batch shape mismatch: {a.shape} vs {b.shape}")
    lead = a.shape[:-2]
    a3 = a.reshape((-1,) + a.shape[-2:])
    b3 = b.reshape((-1,) + b.shape[-2:])
    out = np.stack([_impl.matmul_rows(x, y) for x, y in zip(a3, b3)])
    return out.reshape(lead + out.shape[-2:])
