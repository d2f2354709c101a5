"""Compiled vs pure-Python kernels: wall time and agreement.

    python benchmarks/bench_kernels.py [--repeats 5]

Hilbert codes must match exactly. matmul_rows is compared with an absolute
tolerance because the two paths may accumulate in a different order.
"""

import argparse
import timeit

import numpy as np

from mmet import _kernels_py

try:
    from mmet import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<26}{'fallback s':>12}{'compiled s':>12}{'speedup':>9}  agreement")
    for n, order in ((5404, 10), (100_000, 16)):
        u = rng.integers(0, 2**order, n, dtype=np.int64)
        v = rng.integers(0, 2**order, n, dtype=np.int64)
        ref, fast = _kernels_py.hilbert_encode(u, v, order), _kernels.hilbert_encode(u, v, order)
        tp = _time(lambda: _kernels_py.hilbert_encode(u, v, order), args.repeats)
        tc = _time(lambda: _kernels.hilbert_encode(u, v, order), args.repeats)
        same = "exact" if np.array_equal(ref, fast) else "MISMATCH"
        print(f"{f'hilbert n={n} order={order}':<26}{tp:>12.4g}{tc:>12.4g}{tp / tc:>8.1f}x  {same}")

    for m, k, n in ((1024, 32, 32), (4096, 64, 64), (5404, 64, 192)):
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        ref, fast = _kernels_py.matmul_rows(a, b), _kernels.matmul_rows(a, b)
        tp = _time(lambda: _kernels_py.matmul_rows(a, b), args.repeats)
        tc = _time(lambda: _kernels.matmul_rows(a, b), args.repeats)
        diff = np.abs(ref - fast).max()
        print(f"{f'matmul {m}x{k}x{n}':<26}{tp:>12.4g}{tc:>12.4g}{tp / tc:>8.1f}x  max|diff| {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
