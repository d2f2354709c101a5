import numpy as np
import pytest

from mmet import _kernels_py, kernels


def test_fallback_hilbert_matches_selected_impl(rng):
    u = rng.integers(0, 2**10, 500)
    v = rng.integers(0, 2**10, 500)
    a = kernels.hilbert_encode(u, v, 10)
    b = _kernels_py.hilbert_encode(u.astype(np.int64), v.astype(np.int64), 10)
    np.testing.assert_array_equal(a, b)
    du, dv = _kernels_py.hilbert_decode(np.asarray(a, dtype=np.uint64), 10)
    np.testing.assert_array_equal(du, u)
    np.testing.assert_array_equal(dv, v)


def test_order_one_curve():
    u, v = np.array([0, 0, 1, 1]), np.array([0, 1, 1, 0])
    np.testing.assert_array_equal(kernels.hilbert_encode(u, v, 1), [0, 1, 2, 3])


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_matmul_rows_close_to_numpy(rng, dtype):
    a = rng.standard_normal((37, 19)).astype(dtype)
    b = rng.standard_normal((19, 11)).astype(dtype)
    tol = 1e-12 if dtype == np.float64 else 1e-4
    np.testing.assert_allclose(kernels.matmul_rows(a, b), a @ b, rtol=tol, atol=tol)
    np.testing.assert_allclose(_kernels_py.matmul_rows(a, b), a @ b, rtol=tol, atol=tol)


def test_matmul_rows_is_row_local(rng):
    a = rng.standard_normal((64, 33))
    b = rng.standard_normal((33, 17))
    full = kernels.matmul_rows(a, b)
    for lo, hi in [(0, 1), (5, 6), (3, 35), (63, 64)]:
        np.testing.assert_array_equal(kernels.matmul_rows(a[lo:hi], b), full[lo:hi])


def test_matmul_rows_batched(rng):
    a = rng.standard_normal((2, 5, 4))
    b = rng.standard_normal((2, 4, 3))
    np.testing.assert_allclose(kernels.matmul_rows(a, b), a @ b, rtol=1e-12)
    c = rng.standard_normal((4, 3))
    np.testing.assert_allclose(kernels.matmul_rows(a, c), a @ c, rtol=1e-12)


def test_matmul_rows_rejects_mixed_dtypes(rng):
    with pytest.raises(TypeError):
        kernels.matmul_rows(np.ones((2, 2)), np.ones((2, 2), dtype=np.float32))


def test_compiled_flag_is_bool():
    assert isinstance(kernels.COMPILED, bool)
