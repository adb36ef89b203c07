#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Runs each hot kernel on training-shaped inputs with both implementations,
checks they agree, and prints a timing table. Usage:

    python3 benchmarks/bench_backends.py [--repeat 50] [--size 32]
"""

import argparse
import time

import numpy as np

from grapy import kernels as K


def timeit(fn, repeat):
    fn()  # warm-up (and numba compilation)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba is not importable; only the numpy path is available")
        return

    rng = np.random.default_rng(0)
    h = w = args.size
    cin, cout, kh = 16, 16, 3
    pad = kh // 2
    x = rng.normal(size=(h, w, cin))
    kern = rng.normal(size=(kh, kh, cin, cout))
    g = rng.normal(size=(h, w, cout))
    labels = rng.integers(0, 5, size=(h, w))
    f = rng.normal(size=(h, w, cin))
    nodes = rng.normal(size=(5, cin))
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))

    cases = []

    def add_case(name, np_fn, nb_fn):
        out_np, out_nb = np_fn(), nb_fn()
        if isinstance(out_np, tuple):
            worst = max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max()
                        for a, b in zip(out_np, out_nb))
        else:
            worst = np.abs(out_np - out_nb).max()
        cases.append((name, timeit(np_fn, args.repeat), timeit(nb_fn, args.repeat), worst))

    add_case("conv2d_forward",
             lambda: K._conv2d_forward_np(xp, kern, 1, h, w),
             lambda: K._conv2d_forward_nb(xp, kern, 1, h, w))
    add_case("conv2d_backward_input",
             lambda: K._conv2d_backward_input_np(g, kern, 1, h + 2 * pad, w + 2 * pad),
             lambda: K._conv2d_backward_input_nb(g, kern, 1, h + 2 * pad, w + 2 * pad))
    add_case("conv2d_backward_kernel",
             lambda: K._conv2d_backward_kernel_np(xp, g, 1, kh, kh),
             lambda: K._conv2d_backward_kernel_nb(xp, g, 1, kh, kh))

    f2 = np.ascontiguousarray(f.reshape(-1, cin))
    lab1 = np.ascontiguousarray(labels.reshape(-1))
    add_case("masked_pool_forward",
             lambda: K._masked_pool_np(f2, lab1, 5),
             lambda: K._masked_pool_nb(f2, lab1, 5))

    sums, counts, maxv, argi = K._masked_pool_np(f2, lab1, 5)
    gave = rng.normal(size=(5, cin))
    gmax = rng.normal(size=(5, cin))
    add_case("masked_pool_backward",
             lambda: K._masked_pool_backward_np(gave, gmax, lab1, counts, argi),
             lambda: K._masked_pool_backward_nb(gave, gmax, lab1, counts, argi))

    add_case("gather_rows",
             lambda: nodes[labels],
             lambda: K._gather_rows_nb(nodes, labels, h, w))
    g2 = np.ascontiguousarray(g[:, :, :cin].reshape(-1, cin))
    add_case("scatter_rows",
             lambda: _scatter_np(g2, lab1, 5),
             lambda: K._scatter_rows_nb(g2, lab1, 5))

    print(f"{'kernel':<24} {'numpy':>10} {'numba':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, t_np, t_nb, worst in cases:
        print(f"{name:<24} {t_np * 1e6:>8.1f}us {t_nb * 1e6:>8.1f}us "
              f"{t_np / t_nb:>7.1f}x {worst:>10.2e}")


def _scatter_np(g2, lab1, k):
    out = np.zeros((k, g2.shape[1]))
    np.add.at(out, lab1, g2)
    return out


if __name__ == "__main__":
    main()
