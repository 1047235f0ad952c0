# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im and bilinear x2 resampling.

Semantics and floating-point operation order match ``_pykernels`` so that
both backends produce bitwise-identical results.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad) nogil:
    return (size + 2 * pad - k) // stride + 1


cdef inline void _valid_range(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t size,
                              Py_ssize_t osize, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output positions o with 0 <= o*stride + k - pad < size
    cdef Py_ssize_t a = pad - k
    cdef Py_ssize_t b = size + pad - k
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = 0 if b <= 0 else (b + stride - 1) // stride
    if hi[0] > osize:
        hi[0] = osize
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = _out_size(h, kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(w, kw, stride, pad)
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, iy, row, ylo, yhi, xlo, xhi, off
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ci in range(c):
                for ky in range(kh):
                    _valid_range(ky, pad, stride, h, oh, &ylo, &yhi)
                    for kx in range(kw):
                        _valid_range(kx, pad, stride, w, ow, &xlo, &xhi)
                        row = (ci * kh + ky) * kw + kx
                        off = kx - pad
                        for oy in range(oh):
                            dst = &cols[b, row, oy * ow]
                            if oy < ylo or oy >= yhi:
                                for ox in range(ow):
                                    dst[ox] = 0
                                continue
                            iy = oy * stride + ky - pad
                            src = &x[b, ci, iy, 0]
                            for ox in range(xlo):
                                dst[ox] = 0
                            if stride == 1:
                                for ox in range(xlo, xhi):
                                    dst[ox] = src[ox + off]
                            else:
                                for ox in range(xlo, xhi):
                                    dst[ox] = src[ox * stride + off]
                            for ox in range(xhi, ow):
                                dst[ox] = 0
    return out


def col2im(const floating[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = _out_size(h, kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(w, kw, stride, pad)
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, iy, row, ylo, yhi, xlo, xhi, off
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ci in range(c):
                for ky in range(kh):
                    _valid_range(ky, pad, stride, h, oh, &ylo, &yhi)
                    for kx in range(kw):
                        _valid_range(kx, pad, stride, w, ow, &xlo, &xhi)
                        row = (ci * kh + ky) * kw + kx
                        off = kx - pad
                        for oy in range(ylo, yhi):
                            iy = oy * stride + ky - pad
                            dst = &dx[b, ci, iy, 0]
                            src = &cols[b, row, oy * ow]
                            if stride == 1:
                                for ox in range(xlo, xhi):
                                    dst[ox + off] += src[ox]
                            else:
                                for ox in range(xlo, xhi):
                                    dst[ox * stride + off] += src[ox]
    return out


def upsample2(const floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    tmp_arr = np.empty((n, c, 2 * h, w), dtype=dtype)
    out_arr = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] tmp = tmp_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating q3 = 0.75, q1 = 0.25
    cdef Py_ssize_t b, ci, i, j, lo, hi
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(h):
                    lo = i - 1 if i > 0 else 0
                    hi = i + 1 if i < h - 1 else h - 1
                    for j in range(w):
                        tmp[b, ci, 2 * i, j] = q3 * x[b, ci, i, j] + q1 * x[b, ci, lo, j]
                        tmp[b, ci, 2 * i + 1, j] = q3 * x[b, ci, i, j] + q1 * x[b, ci, hi, j]
                for i in range(2 * h):
                    for j in range(w):
                        lo = j - 1 if j > 0 else 0
                        hi = j + 1 if j < w - 1 else w - 1
                        out[b, ci, i, 2 * j] = q3 * tmp[b, ci, i, j] + q1 * tmp[b, ci, i, lo]
                        out[b, ci, i, 2 * j + 1] = q3 * tmp[b, ci, i, j] + q1 * tmp[b, ci, i, hi]
    return out_arr


def upsample2_backward(const floating[:, :, :, ::1] g):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h2 = g.shape[2], w2 = g.shape[3]
    cdef Py_ssize_t h = h2 // 2, w = w2 // 2
    dtype = np.float32 if floating is float else np.float64
    tmp_arr = np.empty((n, c, h2, w), dtype=dtype)
    out_arr = np.empty((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] tmp = tmp_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating q3 = 0.75, q1 = 0.25
    cdef floating acc
    cdef Py_ssize_t b, ci, i, j
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(h2):
                    for j in range(w):
                        acc = q3 * g[b, ci, i, 2 * j] + q3 * g[b, ci, i, 2 * j + 1]
                        if j < w - 1:
                            acc = acc + q1 * g[b, ci, i, 2 * j + 2]
                        if j == 0:
                            acc = acc + q1 * g[b, ci, i, 0]
                        if j > 0:
                            acc = acc + q1 * g[b, ci, i, 2 * j - 1]
                        if j == w - 1:
                            acc = acc + q1 * g[b, ci, i, 2 * w - 1]
                        tmp[b, ci, i, j] = acc
                for i in range(h):
                    for j in range(w):
                        acc = q3 * tmp[b, ci, 2 * i, j] + q3 * tmp[b, ci, 2 * i + 1, j]
                        if i < h - 1:
                            acc = acc + q1 * tmp[b, ci, 2 * i + 2, j]
                        if i == 0:
                            acc = acc + q1 * tmp[b, ci, 0, j]
                        if i > 0:
                            acc = acc + q1 * tmp[b, ci, 2 * i - 1, j]
                        if i == h - 1:
                            acc = acc + q1 * tmp[b, ci, 2 * h - 1, j]
                        out[b, ci, i, j] = acc
    return out_arr


def tap_gather(const floating[:, :, :, :, ::1] y, int kh, int kw, int oh, int ow):
    cdef Py_ssize_t n = y.shape[0], cout = y.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, cout, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, ky, kx, oy, ox, k
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ky in range(kh):
                for kx in range(kw):
                    k = ky * kw + kx
                    for o in range(cout):
                        for oy in range(oh):
                            dst = &out[b, o, oy, 0]
                            src = &y[b, k, o, oy + ky, kx]
                            for ox in range(ow):
                                dst[ox] += src[ox]
    return out_arr


def tap_scatter(const floating[:, :, :, ::1] g, int kh, int kw, int hp, int wp):
    cdef Py_ssize_t n = g.shape[0], cout = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, kh * kw, cout, hp, wp), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, ky, kx, oy, ox, k
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ky in range(kh):
                for kx in range(kw):
                    k = ky * kw + kx
                    for o in range(cout):
                        for oy in range(oh):
                            dst = &out[b, k, o, oy + ky, kx]
                            src = &g[b, o, oy, 0]
                            for ox in range(ow):
                                dst[ox] = src[ox]
    return out_arr
