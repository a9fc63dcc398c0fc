# cython: language_level=3
"""Compiled im2col / col2im for strided valid convolutions (float64).

Layouts match ``gradsense.kernels`` exactly; col2im accumulates in the same
(ki, kj) order as the numpy fallback so both paths are bit-identical.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    out = np.empty((n, c * k * k, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for i in range(oh):
                            for j in range(ow):
                                cols[b, row, i * ow + j] = x[b, ch, i * stride + ki, j * stride + kj]
    return out


def col2im(const double[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] img = out
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for b in range(n):
                    for ch in range(c):
                        row = (ch * k + ki) * k + kj
                        for i in range(oh):
                            for j in range(ow):
                                img[b, ch, i * stride + ki, j * stride + kj] += cols[b, row, i * ow + j]
    return out
