"""Spatial operations on NCHW tensors: convolution, transposed convolution,
pooling, bilinear resize and batch normalization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backend
from .core import Tensor, make_result, meta_mode, note_branch, placeholder


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution.

    ``padding=None`` selects "same" padding, (K - 1) // 2 for the effective
    (dilated) kernel K, which preserves H and W at stride 1 for odd K.
    ``groups == in_channels == out_channels`` is a depthwise convolution.
    """

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: Optional[int] = None
    groups: int = 1
    bias: bool = True
    effective_kernel: int = field(init=False)

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive int, got {v!r}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        k_eff = self.kernel + (self.kernel - 1) * (self.dilation - 1)
        object.__setattr__(self, "effective_kernel", k_eff)
        if self.padding is None:
            object.__setattr__(self, "padding", (k_eff - 1) // 2)
        elif self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def transpose_weight_shape(self) -> tuple:
        return (self.in_channels, self.out_channels // self.groups, self.kernel, self.kernel)

    def output_size(self, h: int, w: int) -> tuple:
        p, k, s = self.padding, self.effective_kernel, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def transpose_output_size(self, h: int, w: int) -> tuple:
        p, k, s = self.padding, self.effective_kernel, self.stride
        return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k

    def macs(self, h_out: int, w_out: int) -> int:
        """Multiply-accumulates of one application producing an h_out x w_out map."""
        return (self.kernel ** 2 * (self.in_channels // self.groups) * self.out_channels
                * h_out * w_out)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T without materialising transposed copies."""
    return np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)


def _check_conv_inputs(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec,
                       wshape: tuple, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"{op}: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != wshape:
        raise ValueError(f"{op}: weight shape {weight.shape} != expected {wshape}")
    if weight.dtype != x.dtype:
        raise TypeError(f"{op}: dtype mismatch {x.dtype} vs {weight.dtype}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"{op}: bias shape {bias.shape} != ({spec.out_channels},)")


def conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None,
           algo: str = "auto") -> Tensor:
    """2-D cross-correlation with stride, dilation, zero padding and groups.

    ``algo`` picks the forward route: "im2col" (column buffer + GEMM),
    "direct" (kernel loops, no column buffer) or "auto".  Gradients are the
    same for every route.
    """
    _check_conv_inputs(x, weight, bias, spec, spec.weight_shape, "conv2d")
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: zero-size output for input {h}x{w} with spec {spec}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if meta_mode():
        return make_result(placeholder((n, spec.out_channels, ho, wo), x.dtype), parents, None,
                           "conv2d")
    if algo not in ("auto", "im2col", "direct"):
        raise ValueError(f"unknown conv algorithm {algo!r}")

    kern = backend.kernels
    k, s, d, p, groups = spec.kernel, spec.stride, spec.dilation, spec.padding, spec.groups
    cout = spec.out_channels
    xp = _pad(x.data, p)
    wd = weight.data

    if spec.is_depthwise and algo != "im2col":
        out = kern.depthwise_forward(xp, wd[:, 0], s, d, ho, wo)

        def core_backward(g):
            gxp, gw = kern.depthwise_backward(g, xp, wd[:, 0], s, d)
            return gxp, gw[:, None]
    elif k == 1 and s == 1 and p == 0 and groups == 1 and algo != "direct":
        xr = xp.reshape(n, c, h * w)
        wm = wd.reshape(cout, c)
        out = np.matmul(wm, xr).reshape(n, cout, ho, wo)

        def core_backward(g):
            gr = g.reshape(n, cout, ho * wo)
            gx = np.matmul(wm.T, gr).reshape(xp.shape) if x.requires_grad else None
            gw = _contract(gr, xr).reshape(wd.shape)
            return gx, gw
    else:
        cin_g, cout_g = c // groups, cout // groups
        rows = cin_g * k * k
        if algo == "direct":
            out = kern.conv2d_direct(xp, wd, s, d, groups, ho, wo)
            cols = None
        else:
            cols = kern.im2col(xp, k, s, d, ho, wo)
            if groups == 1:
                out = np.matmul(wd.reshape(cout, rows), cols)
            else:
                out = np.empty((n, cout, ho * wo), dtype=x.dtype)
                for gi in range(groups):
                    out[:, gi * cout_g:(gi + 1) * cout_g] = np.matmul(
                        wd[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, rows),
                        cols[:, gi * rows:(gi + 1) * rows])
            out = out.reshape(n, cout, ho, wo)

        def core_backward(g):
            cl = cols if cols is not None else kern.im2col(xp, k, s, d, ho, wo)
            gr = g.reshape(n, cout, ho * wo)
            gw = np.empty_like(wd)
            gcols = np.empty_like(cl) if x.requires_grad else None
            for gi in range(groups):
                osl = slice(gi * cout_g, (gi + 1) * cout_g)
                rsl = slice(gi * rows, (gi + 1) * rows)
                gg = gr[:, osl]
                gw[osl] = _contract(gg, cl[:, rsl]).reshape(cout_g, cin_g, k, k)
                if gcols is not None:
                    gcols[:, rsl] = np.matmul(wd[osl].reshape(cout_g, rows).T, gg)
            gxp = None
            if gcols is not None:
                gxp = kern.col2im(gcols, c, xp.shape[2], xp.shape[3], k, s, d, ho, wo)
            return gxp, gw

    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        gxp, gw = core_backward(g)
        gx = None
        if gxp is not None and x.requires_grad:
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, spec: ConvSpec,
                     bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d` w.r.t. its input).

    ``weight`` has shape (in_channels, out_channels, k, k); only groups=1 is
    supported.  Output extent is (H - 1) * stride - 2 * padding + K.
    """
    _check_conv_inputs(x, weight, bias, spec, spec.transpose_weight_shape, "conv_transpose2d")
    if spec.groups != 1:
        raise ValueError("conv_transpose2d supports groups=1 only")
    n, cin, h, w = x.shape
    ho, wo = spec.transpose_output_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: zero-size output for input {h}x{w} with spec {spec}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    cout = spec.out_channels
    if meta_mode():
        return make_result(placeholder((n, cout, ho, wo), x.dtype), parents, None,
                           "conv_transpose2d")
    kern = backend.kernels
    k, s, d, p = spec.kernel, spec.stride, spec.dilation, spec.padding
    hf, wf = ho + 2 * p, wo + 2 * p
    xr = np.ascontiguousarray(x.data).reshape(n, cin, h * w)
    wm = weight.data.reshape(cin, cout * k * k)
    cols = np.matmul(wm.T, xr)
    full = kern.col2im(cols, cout, hf, wf, k, s, d, h, w)
    out = full[:, :, p:p + ho, p:p + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gcols = kern.im2col(_pad(g, p), k, s, d, h, w)
        gx = np.matmul(wm, gcols).reshape(x.shape) if x.requires_grad else None
        gw = _contract(xr, gcols).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward, "conv_transpose2d")


def pool2d(x: Tensor, kind: str, window: int, stride: Optional[int] = None) -> Tensor:
    """Max or average pooling without padding.

    Max pooling routes the gradient of each window to its first maximum in
    row-major order (lowest linear index).
    """
    stride = window if stride is None else stride
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.ndim != 4:
        raise ValueError(f"pool2d: expected NCHW input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("pool2d: window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool2d: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if meta_mode():
        return make_result(placeholder((n, c, ho, wo), x.dtype), (x,), None, f"{kind}pool")
    kern = backend.kernels
    shape = x.shape
    if kind == "max":
        out, arg = kern.maxpool_forward(x.data, window, stride)
        note_branch(arg)
        return make_result(out, (x,),
                           lambda g: (kern.maxpool_backward(g, arg, shape, window, stride),),
                           "maxpool")
    out = kern.avgpool_forward(x.data, window, stride)
    return make_result(out, (x,), lambda g: (kern.avgpool_backward(g, shape, window, stride),),
                       "avgpool")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


_matrix_cache: dict = {}


def _cached_matrix(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    if key not in _matrix_cache:
        _matrix_cache[key] = bilinear_matrix(n_in, n_out, dtype)
    return _matrix_cache[key]


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize, align_corners=False."""
    if x.ndim != 4:
        raise ValueError(f"resize_bilinear: expected NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize_bilinear: target extent must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if meta_mode():
        return make_result(placeholder((n, c, out_h, out_w), x.dtype), (x,), None, "resize")
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "resize")
    ry = _cached_matrix(h, out_h, x.dtype)
    rx = _cached_matrix(w, out_w, x.dtype)
    out = np.matmul(ry, np.matmul(x.data, rx.T))

    def backward(g):
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return make_result(out, (x,), backward, "resize")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential ``momentum``).
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batchnorm2d: {name} has shape {arr.shape}, input has {c} channels")
    if meta_mode():
        return make_result(placeholder(x.shape, x.dtype), (x, gamma, beta), None, "batchnorm2d")
    xd = x.data
    m = xd.size // c
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (dxhat - s1 / m - xhat * (s2 / m)) * invstd.reshape(1, c, 1, 1)
        else:
            gx = dxhat * invstd.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")
