"""Compare the compiled kernels with the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times a full solve in a subprocess with TWOSCALE_PURE_PYTHON=1 so the
backend choice made at import is exercised end to end.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from twoscale import _kernels_py, kernels

SOLVE = ("import time; from twoscale.mms import make_problem; from twoscale.solver import TwoScaleSolver;"
         "from twoscale.geometry import MacroPartition, MicroMesh; from twoscale import kernels;"
         "p = make_problem('separable-smooth'); t = time.perf_counter();"
         "TwoScaleSolver(p.params(), MacroPartition.uniform(4), MicroMesh(8)).solve();"
         "print(kernels.BACKEND, time.perf_counter() - t)")


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    try:
        from twoscale._ext import kernels as compiled
    except ImportError:
        compiled = None
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<28}{'shape':>14}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for nq, nr in ((1024, 64), (4096, 256), (16384, 256)):
        V, W = rng.normal(size=(2, nq, nr))
        wx, wy = rng.uniform(size=nq), rng.uniform(size=nr)
        X, Y = rng.normal(size=(nq, 3)), rng.normal(size=(nr, 3))
        F = X @ Y.T
        cases = [
            ("weighted_reaction[bilinear]", lambda m: m.weighted_reaction(V, W, 2, 0.25, 4.0, wx, wy)),
            ("tensor_sq_error", lambda m: m.tensor_sq_error(F, X, Y, wx, wy)),
        ]
        for name, call in cases:
            t_py = best(lambda: call(_kernels_py), args.repeat) * 1e3
            if compiled is None:
                print(f"{name:<28}{f'{nq}x{nr}':>14}{t_py:>12.3f}{'n/a':>13}{'':>9}")
                continue
            t_c = best(lambda: call(compiled), args.repeat) * 1e3
            print(f"{name:<28}{f'{nq}x{nr}':>14}{t_py:>12.3f}{t_c:>13.3f}{t_py / t_c:>8.2f}x")
    print("\nfull solve, level 4, micro n=8:")
    for pure in ("1", "0"):
        env = dict(os.environ, TWOSCALE_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SOLVE], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:<8}{float(secs):8.3f} s")


if __name__ == "__main__":
    main()
