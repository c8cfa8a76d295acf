#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times every hot kernel on representative shapes, reports speedups, and
cross-checks that both backends agree numerically.

    python benchmarks/bench_kernels.py [--quick] [--repeats N]
"""

import argparse
import time

import numpy as np

from cmeseg.kernels import numba_backend, numpy_backend


def timeit(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def flatten(result):
    if isinstance(result, tuple):
        return np.concatenate([np.asarray(r).ravel().astype(np.float64)
                               for r in result])
    return np.asarray(result).ravel().astype(np.float64)


def bench_case(name, make_args, call, repeats):
    args = make_args()
    call(numba_backend, *args)  # JIT warm-up
    t_nb, out_nb = timeit(lambda: call(numba_backend, *args), repeats)
    t_np, out_np = timeit(lambda: call(numpy_backend, *args), repeats)
    diff = float(np.max(np.abs(flatten(out_nb) - flatten(out_np))))
    print(f"{name:<34} numba {t_nb * 1e3:8.2f} ms   numpy "
          f"{t_np * 1e3:8.2f} ms   speedup {t_np / t_nb:5.2f}x   "
          f"max|diff| {diff:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true",
                    help="smaller shapes, fewer cases")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    scale = 2 if args.quick else 1

    hw = 492 // scale
    conv_x = rng.standard_normal((1, 8, hw, hw)).astype(np.float32)
    conv_w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    conv_b = np.zeros(8, dtype=np.float32)
    bench_case(f"conv2d fwd 8ch {hw}x{hw} k3",
               lambda: (conv_x, conv_w, conv_b, 1),
               lambda m, *a: m.conv2d_forward(*a), args.repeats)

    gout = rng.standard_normal(
        (1, 8, hw - 2, hw - 2)).astype(np.float32)
    bench_case(f"conv2d grad-input 8ch {hw}x{hw}",
               lambda: (conv_w, gout, 1, hw, hw),
               lambda m, *a: m.conv2d_grad_input(*a), args.repeats)
    bench_case(f"conv2d grad-kernel 8ch {hw}x{hw}",
               lambda: (conv_x, gout, 1, 3, 3),
               lambda m, *a: m.conv2d_grad_kernel(*a), args.repeats)

    fc_in = rng.standard_normal((1, 512, 15, 15)).astype(np.float32)
    fc_w = rng.standard_normal((512, 512, 7, 7)).astype(np.float32)
    fc_b = np.zeros(512, dtype=np.float32)
    bench_case("conv2d fwd 512ch 15x15 k7 (fc)",
               lambda: (fc_in, fc_w, fc_b, 1),
               lambda m, *a: m.conv2d_forward(*a), args.repeats)

    dx = rng.standard_normal((1, 21, 30, 30)).astype(np.float32)
    dw = rng.standard_normal((21, 21, 4, 4)).astype(np.float32)
    db = np.zeros(21, dtype=np.float32)
    bench_case("deconv fwd 21ch 30x30 k4 s2",
               lambda: (dx, dw, db, 2),
               lambda m, *a: m.deconv2d_forward(*a), args.repeats)

    px = rng.standard_normal((1, 64, 246 // scale, 246 // scale)) \
        .astype(np.float32)
    bench_case("maxpool fwd 64ch",
               lambda: (px,),
               lambda m, *a: m.maxpool2x2_forward(*a), args.repeats)

    q = rng.random((2, 96, 96))
    q /= q.sum(axis=0, keepdims=True)
    intensity = rng.random((96, 96))
    ax = np.arange(-6, 7, dtype=np.float64)
    table = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / 8.0)
    table[6, 6] = 0.0
    bench_case("crf spatial messages 96x96",
               lambda: (q, table),
               lambda m, *a: m.crf_spatial_messages(*a), args.repeats)
    bench_case("crf bilateral messages 96x96",
               lambda: (q, intensity, table, 1.0 / (2 * 0.01 ** 2)),
               lambda m, *a: m.crf_bilateral_messages(*a), args.repeats)

    n = (48 // scale) ** 2
    labels = rng.integers(0, 2, n)
    ys, xs = np.divmod(np.arange(n, dtype=np.int64), 48 // scale)
    mu = np.array([[0.0, 1.0], [1.0, 0.0]])
    kinds = np.array([0, 1], dtype=np.int8)
    weights = np.ones(2)
    inv_ss = np.full(2, 1.0 / 8.0)
    inv_sr = np.array([0.0, 1.0 / (2 * 0.01 ** 2)])
    bench_case(f"crf pairwise energy n={n}",
               lambda: (labels, ys.astype(np.float64),
                        xs.astype(np.float64), rng.random(n), mu, kinds,
                        weights, inv_ss, inv_sr),
               lambda m, *a: m.crf_pairwise_energy(*a), args.repeats)

    img = rng.random((256 // scale, 256 // scale))
    p = 8
    ry0 = np.arange(0, img.shape[0] - p + 1, 4)
    RY, RX = np.meshgrid(ry0, ry0, indexing="ij")
    offs = np.arange(-4, 5)
    DY, DX = np.meshgrid(offs, offs, indexing="ij")
    bench_case(f"bm3d distances {img.shape[0]}x{img.shape[0]}",
               lambda: (img, RY.ravel(), RX.ravel(), DY.ravel(),
                        DX.ravel(), p),
               lambda m, *a: m.bm3d_block_distances(*a), args.repeats)


if __name__ == "__main__":
    main()
