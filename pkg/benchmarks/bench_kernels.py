"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Both variants are imported from ``ato.kernels`` regardless of the
ATO_DISABLE_NUMBA flag, checked for agreement, then timed with timeit.
"""
import argparse
import timeit

import numpy as np

from ato import kernels as K
from ato._accel import HAS_NUMBA


def cases(rng):
    x = rng.standard_normal((64, 16, 16, 16))
    cols = K._im2col_numpy(x, 3, 1, 1)
    sizes = rng.integers(8, 200, size=2000)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    z = rng.standard_normal(int(offsets[-1]))
    thr = rng.uniform(0.0, 15.0, size=len(sizes))
    yield ("im2col 64x16x16x16 k3", (x, 3, 1, 1), K._im2col_loops, K._im2col_numpy)
    yield ("col2im 64x16x16x16 k3", (cols, 64, 16, 16, 16, 3, 1, 1),
           K._col2im_loops, K._col2im_numpy)
    yield ("group prox 2000 groups", (z, offsets, thr), K._group_prox_loops, K._group_prox_numpy)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, call_args, fast, slow in cases(rng):
        np.testing.assert_allclose(fast(*call_args), slow(*call_args), rtol=1e-12, atol=1e-12)
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<26}{t_fast * 1e3:10.3f}{t_slow * 1e3:10.3f}{t_slow / t_fast:9.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
