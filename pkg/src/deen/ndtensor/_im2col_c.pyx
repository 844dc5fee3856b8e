# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im for dilated, strided, zero-padded 2-D convolution.

Same column layout and accumulation order as ``_im2col_py``.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad, int dil,
           int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, i, j, b, y, xo, ih, iw, row, base
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * kh * kw, n * oh * ow), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for b in range(n):
                        for y in range(oh):
                            ih = y * stride - pad + i * dil
                            if ih < 0 or ih >= h:
                                continue
                            base = (b * oh + y) * ow
                            for xo in range(ow):
                                iw = xo * stride - pad + j * dil
                                if iw >= 0 and iw < w:
                                    cols[row, base + xo] = x[b, ci, ih, iw]
    return out


def col2im(floating[:, ::1] cols, int n, int c, int h, int w, int kh, int kw,
           int stride, int pad, int dil, int oh, int ow):
    cdef Py_ssize_t ci, i, j, b, y, xo, ih, iw, row, base
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for ci in range(c):
                    row = (ci * kh + i) * kw + j
                    for b in range(n):
                        for y in range(oh):
                            ih = y * stride - pad + i * dil
                            if ih < 0 or ih >= h:
                                continue
                            base = (b * oh + y) * ow
                            for xo in range(ow):
                                iw = xo * stride - pad + j * dil
                                if iw >= 0 and iw < w:
                                    dx[b, ci, ih, iw] += cols[row, base + xo]
    return out
