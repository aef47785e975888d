"""Compiled vs pure-Python kernel timings.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel and problem size with the median time of each
backend and the speedup. The compiled extension must be built
(``pip install -e . --no-build-isolation``).
"""
import argparse
import statistics
import time

import numpy as np

from fieldgrasp import _kernels_py as py

try:
    from fieldgrasp import _kernels as cy
except ImportError:  # pragma: no cover
    cy = None


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    # message-passing aggregation: edges x latent -> nodes
    for n_nodes, n_edges, width in ((300, 3_000, 32), (2_000, 25_000, 64), (2_000, 25_000, 128)):
        v = rng.normal(size=(n_edges, width))
        idx = rng.integers(0, n_nodes, size=n_edges)
        yield (f"scatter_add_rows {n_edges}x{width}->{n_nodes}", "scatter_add_rows",
               (v, idx, n_nodes))
    # gripper-to-object contact search
    for n_obj in (300, 2_000):
        a = rng.uniform(-0.01, 0.01, size=(50, 3))
        b = rng.uniform(-0.03, 0.03, size=(n_obj, 3))
        yield f"radius_pairs 50x{n_obj}", "radius_pairs", (a, b, 0.005)
    # rank correlation of grasp scores
    for n in (100, 1_000):
        x, y = rng.normal(size=n), rng.normal(size=n)
        yield f"kendall_counts n={n}", "kendall_counts", (x, y)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if cy is None:
        raise SystemExit("compiled kernels are not built")
    rng = np.random.default_rng(args.seed)
    print(f"{'case':<40} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, call_args in cases(rng):
        f_py, f_cy = getattr(py, name), getattr(cy, name)
        a, b = f_py(*call_args), f_cy(*call_args)
        same = all(np.array_equal(x, y) for x, y in zip(np.atleast_1d(a), np.atleast_1d(b))) \
            if isinstance(a, tuple) else np.array_equal(a, b)
        if not same:
            raise SystemExit(f"{label}: backends disagree")
        t_py = median_time(lambda: f_py(*call_args), args.repeat)
        t_cy = median_time(lambda: f_cy(*call_args), args.repeat)
        print(f"{label:<40} {t_py * 1e3:>10.3f} {t_cy * 1e3:>10.3f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
