# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels (see _ref.py for the
reference semantics; layouts and index conventions must match exactly)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, fmod

cnp.import_array()

NAME = "compiled"


def im2col(x, int kh, int kw, int stride, int pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t i, ch, ki, kj, oy, ox, iy, ix, row
    cdef double v
    for i in range(n):
        for ch in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ch * kh + ki) * kw + kj
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        for ox in range(ow):
                            ix = ox * stride + kj - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                v = xv[i, ch, iy, ix]
                            else:
                                v = 0.0
                            ov[i, row, oy * ow + ox] = v
    return out


def col2im(cols, int h, int w, int kh, int kw, int stride, int pad):
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t n = cv.shape[0], ckk = cv.shape[1]
    cdef Py_ssize_t c = ckk // (kh * kw)
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t i, ch, ki, kj, oy, ox, iy, ix, row
    for i in range(n):
        for ch in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ch * kh + ki) * kw + kj
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + kj - pad
                            if 0 <= ix < w:
                                ov[i, ch, iy, ix] += cv[i, row, oy * ow + ox]
    return out


def cell_histograms(mag, ang, int cell_px, int bins, bint signed):
    cdef double[:, ::1] mv = np.ascontiguousarray(mag, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(ang, dtype=np.float64)
    cdef Py_ssize_t h = mv.shape[0], w = mv.shape[1]
    cdef Py_ssize_t ncy = h // cell_px, ncx = w // cell_px
    cdef double period = 2.0 * np.pi if signed else np.pi
    cdef double width = period / bins
    out = np.zeros((ncy, ncx, bins), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t y, x, b
    cdef double a
    for y in range(h):
        for x in range(w):
            a = fmod(av[y, x], period)
            if a < 0.0:
                a += period
            b = <Py_ssize_t>floor(a / width)
            if b > bins - 1:
                b = bins - 1
            ov[y // cell_px, x // cell_px, b] += mv[y, x]
    return out


def bilinear_crop(image, rect, int out_px):
    cdef double[:, :, ::1] im = np.ascontiguousarray(image, dtype=np.float64)
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1], c = im.shape[2]
    cdef double x0 = rect[0], y0 = rect[1], x1 = rect[2], y1 = rect[3]
    out = np.empty((out_px, out_px, c), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t oy, ox, ch, ix0, iy0, ix1, iy1
    cdef double u, sx, sy, fx, fy
    for oy in range(out_px):
        u = (oy + 0.5) / out_px
        sy = (y0 + u * (y1 - y0)) * h - 0.5
        if sy < 0.0:
            sy = 0.0
        if sy > h - 1.0:
            sy = h - 1.0
        iy0 = <Py_ssize_t>floor(sy)
        iy1 = iy0 + 1 if iy0 + 1 < h else h - 1
        fy = sy - iy0
        for ox in range(out_px):
            u = (ox + 0.5) / out_px
            sx = (x0 + u * (x1 - x0)) * w - 0.5
            if sx < 0.0:
                sx = 0.0
            if sx > w - 1.0:
                sx = w - 1.0
            ix0 = <Py_ssize_t>floor(sx)
            ix1 = ix0 + 1 if ix0 + 1 < w else w - 1
            fx = sx - ix0
            for ch in range(c):
                ov[oy, ox, ch] = (
                    (1.0 - fy) * (1.0 - fx) * im[iy0, ix0, ch]
                    + (1.0 - fy) * fx * im[iy0, ix1, ch]
                    + fy * (1.0 - fx) * im[iy1, ix0, ch]
                    + fy * fx * im[iy1, ix1, ch]
                )
    return out
