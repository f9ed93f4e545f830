"""Compare the compiled and numpy Max-Min kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow training: a batch of 128 bags of 200 instances with a handful of
class columns, s = 20.  Both backends are checked for identical output first.
"""

import argparse
import timeit

import numpy as np

from gasmil import kernels
from gasmil.numerics import make_rng

CASES = [
    # (batch, n, columns, s)
    (128, 200, 6, 20),
    (128, 200, 3, 20),
    (64, 50, 3, 20),
    (128, 1000, 6, 20),
    (1, 200, 6, 1),
]


def bench(backend, b, s, index, repeat):
    t_sel = min(timeit.repeat(lambda: backend.maxmin_select(b, s), number=1, repeat=repeat))
    g = np.ones(index.shape)
    n = b.shape[1]
    t_sc = min(timeit.repeat(lambda: backend.maxmin_scatter(g, index, n), number=1, repeat=repeat))
    return t_sel, t_sc


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.compiled_backend is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = make_rng(0)
    header = f"{'batch x n x cols, s':>24} {'backend':>9} {'select ms':>10} {'scatter ms':>11}"
    print(header)
    print("-" * len(header))
    for batch, n, cols, s in CASES:
        b = rng.standard_normal((batch, n, cols))
        ref_vals, ref_idx = kernels.python_backend.maxmin_select(b, s)
        label = f"{batch}x{n}x{cols}, s={s}"
        speeds = {}
        for name, backend in (("numpy", kernels.python_backend), ("compiled", kernels.compiled_backend)):
            if backend is None:
                continue
            vals, idx = backend.maxmin_select(b, s)
            assert np.array_equal(vals, ref_vals) and np.array_equal(idx, ref_idx), name
            t_sel, t_sc = bench(backend, b, s, ref_idx, args.repeat)
            speeds[name] = t_sel + t_sc
            print(f"{label:>24} {name:>9} {t_sel * 1e3:10.3f} {t_sc * 1e3:11.3f}")
        if len(speeds) == 2:
            print(f"{'':>24} {'speedup':>9} {speeds['numpy'] / speeds['compiled']:10.1f}x")


if __name__ == "__main__":
    main()
