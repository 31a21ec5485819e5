"""Time the numba and numpy paths of the metric kernels side by side.

    python benchmarks/bench_kernels.py [--sizes 1000 2000 4000] [--repeat 3]

The numba kernels are warmed up once before timing so JIT compilation is not
counted. Prints per-kernel best-of-repeat wall time, speedup and the largest
absolute difference between the two paths.
"""

import argparse
import time

import numpy as np

from tlcm import _kernels


def _best(fn, args, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, float(out)


def _inputs(name, n, gen):
    if name == "cross_mean_dist":
        return gen.standard_normal((n, 2)), gen.standard_normal((n, 2)) + 0.5
    if name == "self_mean_dist":
        return (gen.standard_normal((n, 2)),)
    return np.sort(gen.standard_normal(n)), np.sort(gen.standard_normal(n + 7) * 1.3)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if not _kernels.NUMBA_AVAILABLE:
        print("numba unavailable (or TLCM_DISABLE_NUMBA set); nothing to compare")
        return 1

    gen = np.random.default_rng(0)
    for name, fn in _kernels.numba_impl.items():
        fn(*_inputs(name, 16, gen))  # warm-up compile

    print(f"{'kernel':<16} {'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for name in _kernels.numpy_impl:
        for n in args.sizes:
            data = _inputs(name, n, gen)
            t_np, v_np = _best(_kernels.numpy_impl[name], data, args.repeat)
            t_nb, v_nb = _best(_kernels.numba_impl[name], data, args.repeat)
            print(f"{name:<16} {n:>6} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} "
                  f"{t_np / t_nb:>7.1f}x {abs(v_np - v_nb):>10.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
