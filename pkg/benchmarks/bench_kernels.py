"""Compiled vs numpy conv kernels: im2col + col2im round trip, and a full conv2d forward/backward.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from gradsense import autodiff as ad
from gradsense import kernels

SHAPES = [
    # (batch, channels, height, width), kernel, stride
    ((4, 1, 16, 16), 5, 2),
    ((8, 12, 16, 16), 5, 2),
    ((8, 12, 32, 32), 5, 1),
]


def time_roundtrip(fwd, adj, x, k, stride, repeats):
    _, c, h, w = x.shape
    fwd(x, k, stride)
    t0 = time.perf_counter()
    for _ in range(repeats):
        adj(fwd(x, k, stride), c, h, w, k, stride)
    return (time.perf_counter() - t0) / repeats


def time_conv(x, k, stride, repeats):
    rng = np.random.default_rng(1)
    w = ad.Variable(rng.normal(size=(6, x.shape[1], k, k)))
    xv = ad.Variable(x)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = ad.sum(ad.conv2d(xv, w, stride=stride))
        ad.differentiate(out, [xv, w])
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    print(f"active backend: {kernels.BACKEND}")
    if kernels.BACKEND != "cython":
        print("compiled extension not available; timing numpy only")
    rng = np.random.default_rng(0)
    for shape, k, stride in SHAPES:
        x = rng.random(shape)
        ref = time_roundtrip(kernels.im2col_numpy, kernels.col2im_numpy, x, k, stride, args.repeats)
        line = f"{'x'.join(map(str, shape))} k={k} s={stride}: numpy {ref * 1e6:8.1f} us"
        if kernels.BACKEND == "cython":
            fast = time_roundtrip(kernels.im2col, kernels.col2im, x, k, stride, args.repeats)
            same = np.array_equal(kernels.im2col(x, k, stride), kernels.im2col_numpy(x, k, stride))
            line += f"  cython {fast * 1e6:8.1f} us  speedup {ref / fast:5.2f}x  identical={same}"
        print(line)
    x = rng.random(SHAPES[1][0])
    print(f"conv2d forward+backward ({kernels.BACKEND}): "
          f"{time_conv(x, SHAPES[1][1], SHAPES[1][2], max(args.repeats // 10, 1)) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
