# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3x3 convolution kernels (NCHW, same padding, float32).

Each output row is accumulated in a local buffer so the compiler can prove
no aliasing and vectorize the multiply-accumulate loops.
"""

import numpy as np

cimport numpy as cnp
from libc.stdlib cimport free, malloc
from libc.string cimport memset

cnp.import_array()

DEF MAX_W = 4096


def conv3x3_forward(cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] x,
                    cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] weight,
                    cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] bias):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = weight.shape[0]
    if w > MAX_W:
        raise ValueError(f"row width {w} exceeds compiled limit {MAX_W}")
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] out = np.empty(
        (n, co, h, w), dtype=np.float32)
    cdef float *xp = <float *> x.data
    cdef float *wp = <float *> weight.data
    cdef float *bp = <float *> bias.data
    cdef float *op = <float *> out.data
    cdef Py_ssize_t i, o, ci, y, xx, dy, dx, yy, x0, x1
    cdef float wv, bv
    cdef float tmp[MAX_W]
    cdef float *xrow
    cdef float *orow
    for i in range(n):
        for o in range(co):
            bv = bp[o]
            for y in range(h):
                for xx in range(w):
                    tmp[xx] = bv
                for ci in range(c):
                    for dy in range(3):
                        yy = y + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        xrow = xp + ((i * c + ci) * h + yy) * w
                        for dx in range(3):
                            wv = wp[((o * c + ci) * 3 + dy) * 3 + dx]
                            x0 = 1 - dx if dx < 1 else 0
                            x1 = w if dx <= 1 else w - 1
                            for xx in range(x0, x1):
                                tmp[xx] += wv * xrow[xx + dx - 1]
                orow = op + ((i * co + o) * h + y) * w
                for xx in range(w):
                    orow[xx] = tmp[xx]
    return out


def conv3x3_backward(cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] x,
                     cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] weight,
                     cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] grad_out):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = weight.shape[0]
    if w > MAX_W:
        raise ValueError(f"row width {w} exceeds compiled limit {MAX_W}")
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] gx = np.zeros(
        (n, c, h, w), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4, mode="c"] gw = np.zeros(
        (co, c, 3, 3), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] gb = np.zeros(
        co, dtype=np.float32)
    cdef float *xp = <float *> x.data
    cdef float *wp = <float *> weight.data
    cdef float *gop = <float *> grad_out.data
    cdef float *gxp = <float *> gx.data
    cdef float *gwp = <float *> gw.data
    cdef float *gbp = <float *> gb.data
    cdef Py_ssize_t i, o, ci, y, xx, dy, dx, yy, x0, x1
    cdef float wv, acc
    cdef float tmp[MAX_W]
    cdef float *grow
    cdef float *xrow
    cdef float *gxrow

    # grad bias
    for i in range(n):
        for o in range(co):
            acc = 0.0
            grow = gop + ((i * co + o) * h) * w
            for xx in range(h * w):
                acc += grow[xx]
            gbp[o] += acc

    # grad input: for fixed (i, ci, yy), gather shifted rows of grad_out
    for i in range(n):
        for ci in range(c):
            for yy in range(h):
                for xx in range(w):
                    tmp[xx] = 0.0
                for o in range(co):
                    for dy in range(3):
                        y = yy - dy + 1
                        if y < 0 or y >= h:
                            continue
                        grow = gop + ((i * co + o) * h + y) * w
                        for dx in range(3):
                            wv = wp[((o * c + ci) * 3 + dy) * 3 + dx]
                            x0 = 1 - dx if dx < 1 else 0
                            x1 = w if dx <= 1 else w - 1
                            for xx in range(x0, x1):
                                tmp[xx + dx - 1] += wv * grow[xx]
                gxrow = gxp + ((i * c + ci) * h + yy) * w
                for xx in range(w):
                    gxrow[xx] = tmp[xx]

    # grad weight: shifted row dot products
    for i in range(n):
        for o in range(co):
            for ci in range(c):
                for dy in range(3):
                    for dx in range(3):
                        wv = 0.0
                        x0 = 1 - dx if dx < 1 else 0
                        x1 = w if dx <= 1 else w - 1
                        for y in range(h):
                            yy = y + dy - 1
                            if yy < 0 or yy >= h:
                                continue
                            grow = gop + ((i * co + o) * h + y) * w
                            xrow = xp + ((i * c + ci) * h + yy) * w + (dx - 1)
                            for xx in range(x0, x1):
                                wv += grow[xx] * xrow[xx]
                        gwp[((o * c + ci) * 3 + dy) * 3 + dx] += wv
    return gx, gw, gb
