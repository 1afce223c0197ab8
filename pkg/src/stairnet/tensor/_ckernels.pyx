# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels.

Same API and array conventions as ``_pykernels``; pixel loops run here.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

NAME = "compiled"


cdef void _im2col(const floating[:, :, :, ::1] xp, floating[:, :, ::1] cols,
                  int k, int stride, int dil, int hout, int wout) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, row, col
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    for n in range(N):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    col = 0
                    for oh in range(hout):
                        for ow in range(wout):
                            cols[n, row, col] = xp[n, c, oh * stride + ki * dil, ow * stride + kj * dil]
                            col += 1


def im2col(xp, int k, int stride, int dil, int hout, int wout):
    xp = np.ascontiguousarray(xp)
    cols = np.empty((xp.shape[0], xp.shape[1] * k * k, hout * wout), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _im2col[float](xp, cols, k, stride, dil, hout, wout)
    else:
        _im2col[double](xp, cols, k, stride, dil, hout, wout)
    return cols


cdef void _col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] xp,
                  int k, int stride, int dil, int hout, int wout) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, row, col
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    for n in range(N):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    col = 0
                    for oh in range(hout):
                        for ow in range(wout):
                            xp[n, c, oh * stride + ki * dil, ow * stride + kj * dil] += cols[n, row, col]
                            col += 1


def col2im(cols, int channels, int hp, int wp, int k, int stride, int dil, int hout, int wout):
    cols = np.ascontiguousarray(cols)
    xp = np.zeros((cols.shape[0], channels, hp, wp), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, xp, k, stride, dil, hout, wout)
    else:
        _col2im[double](cols, xp, k, stride, dil, hout, wout)
    return xp


cdef void _conv_direct(const floating[:, :, :, ::1] xp, const floating[:, :, :, ::1] w,
                       floating[:, :, :, ::1] out, int stride, int dil, int groups) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], Cout = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t cin_g = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t cout_g = Cout // groups
    cdef Py_ssize_t n, o, g, ci, ki, kj, oh, ow, cbase
    cdef floating acc, wv
    for n in range(N):
        for o in range(Cout):
            g = o // cout_g
            cbase = g * cin_g
            for oh in range(H):
                for ow in range(W):
                    acc = 0
                    for ci in range(cin_g):
                        for ki in range(k):
                            for kj in range(k):
                                acc = acc + w[o, ci, ki, kj] * xp[n, cbase + ci, oh * stride + ki * dil, ow * stride + kj * dil]
                    out[n, o, oh, ow] = acc


def conv2d_direct(xp, w, int stride, int dil, int groups, int hout, int wout):
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    out = np.empty((xp.shape[0], w.shape[0], hout, wout), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _conv_direct[float](xp, w, out, stride, dil, groups)
    else:
        _conv_direct[double](xp, w, out, stride, dil, groups)
    return out


cdef void _dw_fwd(const floating[:, :, :, ::1] xp, const floating[:, :, ::1] w,
                  floating[:, :, :, ::1] out, int stride, int dil) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t k = w.shape[1]
    cdef Py_ssize_t n, c, ki, kj, oh, ow
    cdef floating acc
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    acc = 0
                    for ki in range(k):
                        for kj in range(k):
                            acc = acc + w[c, ki, kj] * xp[n, c, oh * stride + ki * dil, ow * stride + kj * dil]
                    out[n, c, oh, ow] = acc


def depthwise_forward(xp, w, int stride, int dil, int hout, int wout):
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    out = np.empty((xp.shape[0], xp.shape[1], hout, wout), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _dw_fwd[float](xp, w, out, stride, dil)
    else:
        _dw_fwd[double](xp, w, out, stride, dil)
    return out


cdef void _dw_bwd(const floating[:, :, :, ::1] g, const floating[:, :, :, ::1] xp,
                  const floating[:, :, ::1] w, floating[:, :, :, ::1] gxp,
                  floating[:, :, ::1] gw, int stride, int dil) noexcept nogil:
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t k = w.shape[1]
    cdef Py_ssize_t n, c, ki, kj, oh, ow, r, q
    cdef floating gv
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    gv = g[n, c, oh, ow]
                    for ki in range(k):
                        r = oh * stride + ki * dil
                        for kj in range(k):
                            q = ow * stride + kj * dil
                            gw[c, ki, kj] += gv * xp[n, c, r, q]
                            gxp[n, c, r, q] += gv * w[c, ki, kj]


def depthwise_backward(g, xp, w, int stride, int dil):
    g = np.ascontiguousarray(g)
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    if g.dtype == np.float32:
        _dw_bwd[float](g, xp, w, gxp, gw, stride, dil)
    else:
        _dw_bwd[double](g, xp, w, gxp, gw, stride, dil)
    return gxp, gw


cdef void _maxpool_fwd(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                       int[:, :, :, ::1] arg, int window, int stride) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t n, c, oh, ow, ki, kj
    cdef floating best, v
    cdef int besti
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    best = x[n, c, oh * stride, ow * stride]
                    besti = 0
                    for ki in range(window):
                        for kj in range(window):
                            v = x[n, c, oh * stride + ki, ow * stride + kj]
                            if v > best:
                                best = v
                                besti = <int>(ki * window + kj)
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = besti


def maxpool_forward(x, int window, int stride):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    hout = (h - window) // stride + 1
    wout = (w - window) // stride + 1
    out = np.empty((n, c, hout, wout), dtype=x.dtype)
    arg = np.empty((n, c, hout, wout), dtype=np.int32)
    if x.dtype == np.float32:
        _maxpool_fwd[float](x, out, arg, window, stride)
    else:
        _maxpool_fwd[double](x, out, arg, window, stride)
    return out, arg


cdef void _maxpool_bwd(const floating[:, :, :, ::1] g, const int[:, :, :, ::1] arg,
                       floating[:, :, :, ::1] gx, int window, int stride) noexcept nogil:
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t n, c, oh, ow
    cdef int a
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    a = arg[n, c, oh, ow]
                    gx[n, c, oh * stride + a // window, ow * stride + a % window] += g[n, c, oh, ow]


def maxpool_backward(g, arg, x_shape, int window, int stride):
    g = np.ascontiguousarray(g)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    gx = np.zeros(x_shape, dtype=g.dtype)
    if g.dtype == np.float32:
        _maxpool_bwd[float](g, arg, gx, window, stride)
    else:
        _maxpool_bwd[double](g, arg, gx, window, stride)
    return gx


cdef void _avgpool_fwd(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                       int window, int stride) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t n, c, oh, ow, ki, kj
    cdef floating acc
    cdef floating scale = 1.0 / (window * window)
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    acc = 0
                    for ki in range(window):
                        for kj in range(window):
                            acc = acc + x[n, c, oh * stride + ki, ow * stride + kj]
                    out[n, c, oh, ow] = acc * scale


def avgpool_forward(x, int window, int stride):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, (h - window) // stride + 1, (w - window) // stride + 1), dtype=x.dtype)
    if x.dtype == np.float32:
        _avgpool_fwd[float](x, out, window, stride)
    else:
        _avgpool_fwd[double](x, out, window, stride)
    return out


cdef void _avgpool_bwd(const floating[:, :, :, ::1] g, floating[:, :, :, ::1] gx,
                       int window, int stride) noexcept nogil:
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t n, c, oh, ow, ki, kj
    cdef floating share
    cdef floating scale = 1.0 / (window * window)
    for n in range(N):
        for c in range(C):
            for oh in range(H):
                for ow in range(W):
                    share = g[n, c, oh, ow] * scale
                    for ki in range(window):
                        for kj in range(window):
                            gx[n, c, oh * stride + ki, ow * stride + kj] += share


def avgpool_backward(g, x_shape, int window, int stride):
    g = np.ascontiguousarray(g)
    gx = np.zeros(x_shape, dtype=g.dtype)
    if g.dtype == np.float32:
        _avgpool_bwd[float](g, gx, window, stride)
    else:
        _avgpool_bwd[double](g, gx, window, stride)
    return gx
