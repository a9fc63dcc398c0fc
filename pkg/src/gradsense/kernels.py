"""Convolution lowering kernels with import-time backend selection.

``im2col`` maps an ``(N, C, H, W)`` batch to ``(N, C*k*k, OH*OW)`` columns
(row index ``(c*k + ki)*k + kj``); ``col2im`` is its adjoint. The compiled
extension is used when importable unless ``GRADSENSE_PURE_PYTHON`` is set.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(size, k, stride):
    if k < 1 or stride < 1 or k > size:
        raise ValueError(f"kernel {k} with stride {stride} does not fit a spatial size of {size}")
    return (size - k) // stride + 1


def im2col_numpy(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, stride), out_size(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, C, OH, OW, k, k) -> (N, C, k, k, OH, OW)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, oh * ow)


def col2im_numpy(cols, c, h, w, k, stride):
    n = cols.shape[0]
    oh, ow = out_size(h, k, stride), out_size(w, k, stride)
    blocks = cols.reshape(n, c, k, k, oh, ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += blocks[:, :, ki, kj]
    return out


def _load_backend():
    if os.environ.get("GRADSENSE_PURE_PYTHON"):
        return "numpy", im2col_numpy, col2im_numpy
    try:
        from gradsense import _ckernels
    except ImportError:
        return "numpy", im2col_numpy, col2im_numpy

    def im2col_c(x, k, stride):
        return _ckernels.im2col(np.ascontiguousarray(x, dtype=np.float64), k, stride)

    def col2im_c(cols, c, h, w, k, stride):
        return _ckernels.col2im(np.ascontiguousarray(cols, dtype=np.float64), c, h, w, k, stride)

    return "cython", im2col_c, col2im_c


BACKEND, im2col, col2im = _load_backend()
