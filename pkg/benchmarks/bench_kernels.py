"""Time the numba geometry kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--points 4096] [--repeat 5]

The numba kernels are compiled once before timing.  Each line reports the best
of ``--repeat`` wall-clock runs for both paths and checks the outputs agree.
"""
import argparse
import timeit

import numpy as np

from pointcra import _kernels as K


def cases(n):
    rng = np.random.default_rng(0)
    pos = rng.random((n, 3))
    query = pos[: n // 4].copy()
    idx = rng.integers(0, n // 4, size=(n, 16))
    vals = rng.normal(size=(n, 16, 32))
    return {
        "fps": ((pos, n // 4, 0), K.fps_np, getattr(K, "fps_nb", None)),
        "knn": ((query, pos, 16), K.knn_np, getattr(K, "knn_nb", None)),
        "ball_query": ((query, pos, 0.01, 32), K.ball_query_np, getattr(K, "ball_query_nb", None)),
        "scatter_add": (
            (idx.reshape(-1), vals.reshape(-1, 32)),
            lambda i, v: K.scatter_add_np(np.zeros((n // 4, 32)), i, v),
            None if not K.HAVE_NUMBA else lambda i, v: K.scatter_add_nb(np.zeros((n // 4, 32)), i, v),
        ),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b) if a is not None else b is None


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':<12} {'numpy s':>10} {'numba s':>10} {'speedup':>8} agree")
    for name, (inputs, np_fn, nb_fn) in cases(args.points).items():
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat))
        if nb_fn is None:
            print(f"{name:<12} {t_np:10.4f} {'n/a':>10}")
            continue
        nb_fn(*inputs)  # compile
        t_nb = min(timeit.repeat(lambda: nb_fn(*inputs), number=1, repeat=args.repeat))
        agree = same(np_fn(*inputs), nb_fn(*inputs))
        print(f"{name:<12} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} {agree}")


if __name__ == "__main__":
    main()
