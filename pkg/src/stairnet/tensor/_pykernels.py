"""Pure numpy implementations of the convolution/pooling kernels.

Mirrors the API of the compiled ``_ckernels`` module exactly; selected by
:mod:`stairnet.tensor.backend` when the extension is unavailable.  Loops
here run over kernel taps only, never over pixels.

Array conventions: ``xp`` is an already padded (N, C, Hp, Wp) input,
``cols`` is (N, C*k*k, Hout*Wout) with channel-major, then row-major tap
ordering, matching a weight reshaped to (Cout, C*k*k).
"""
import numpy as np

NAME = "python"


def _tap(xp, ki, kj, stride, dil, hout, wout):
    r0, c0 = ki * dil, kj * dil
    return xp[:, :, r0:r0 + stride * (hout - 1) + 1:stride, c0:c0 + stride * (wout - 1) + 1:stride]


def im2col(xp, k, stride, dil, hout, wout):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, hout, wout), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = _tap(xp, ki, kj, stride, dil, hout, wout)
    return cols.reshape(n, c * k * k, hout * wout)


def col2im(cols, channels, hp, wp, k, stride, dil, hout, wout):
    n = cols.shape[0]
    cols = cols.reshape(n, channels, k, k, hout, wout)
    xp = np.zeros((n, channels, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            _tap(xp, ki, kj, stride, dil, hout, wout)[...] += cols[:, :, ki, kj]
    return xp


def conv2d_direct(xp, w, stride, dil, groups, hout, wout):
    """Tap-by-tap direct convolution (no column buffer); bias excluded."""
    n = xp.shape[0]
    cout, cin_g, k, _ = w.shape
    cout_g = cout // groups
    out = np.zeros((n, cout, hout, wout), dtype=xp.dtype)
    for g in range(groups):
        xs = xp[:, g * cin_g:(g + 1) * cin_g]
        ws = w[g * cout_g:(g + 1) * cout_g]
        acc = out[:, g * cout_g:(g + 1) * cout_g]
        for ki in range(k):
            for kj in range(k):
                patch = _tap(xs, ki, kj, stride, dil, hout, wout)
                acc += np.einsum("oc,nchw->nohw", ws[:, :, ki, kj], patch, optimize=False)
    return out


def depthwise_forward(xp, w, stride, dil, hout, wout):
    """Per-channel convolution; ``w`` has shape (C, k, k)."""
    n, c = xp.shape[:2]
    k = w.shape[-1]
    out = np.zeros((n, c, hout, wout), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            out += w[None, :, ki, kj, None, None] * _tap(xp, ki, kj, stride, dil, hout, wout)
    return out


def depthwise_backward(g, xp, w, stride, dil):
    n, c, hout, wout = g.shape
    k = w.shape[-1]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for ki in range(k):
        for kj in range(k):
            patch = _tap(xp, ki, kj, stride, dil, hout, wout)
            gw[:, ki, kj] = np.einsum("nchw,nchw->c", g, patch)
            _tap(gxp, ki, kj, stride, dil, hout, wout)[...] += w[None, :, ki, kj, None, None] * g
    return gxp, gw


def maxpool_forward(x, window, stride):
    """Returns (out, arg) where ``arg`` is the winning tap index ki*window+kj.

    Scanning taps in row-major order with a strict comparison makes the
    first (lowest linear index) maximum win ties.
    """
    n, c, h, w = x.shape
    hout = (h - window) // stride + 1
    wout = (w - window) // stride + 1
    out = _tap(x, 0, 0, stride, 1, hout, wout).copy()
    arg = np.zeros(out.shape, dtype=np.int32)
    for ki in range(window):
        for kj in range(window):
            if ki == 0 and kj == 0:
                continue
            v = _tap(x, ki, kj, stride, 1, hout, wout)
            better = v > out
            out = np.where(better, v, out)
            arg[better] = ki * window + kj
    return out, arg


def maxpool_backward(g, arg, x_shape, window, stride):
    gx = np.zeros(x_shape, dtype=g.dtype)
    hout, wout = g.shape[2:]
    for ki in range(window):
        for kj in range(window):
            _tap(gx, ki, kj, stride, 1, hout, wout)[...] += np.where(arg == ki * window + kj, g, 0)
    return gx


def avgpool_forward(x, window, stride):
    n, c, h, w = x.shape
    hout = (h - window) // stride + 1
    wout = (w - window) // stride + 1
    out = np.zeros((n, c, hout, wout), dtype=x.dtype)
    for ki in range(window):
        for kj in range(window):
            out += _tap(x, ki, kj, stride, 1, hout, wout)
    return out * x.dtype.type(1.0 / (window * window))


def avgpool_backward(g, x_shape, window, stride):
    gx = np.zeros(x_shape, dtype=g.dtype)
    hout, wout = g.shape[2:]
    share = g * g.dtype.type(1.0 / (window * window))
    for ki in range(window):
        for kj in range(window):
            _tap(gx, ki, kj, stride, 1, hout, wout)[...] += share
    return gx
