"""Elementwise, reduction and shape operations.

All functions accept :class:`Tensor` inputs (python scalars are promoted for
binary ops) and return tracked results when any input requires grad.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import Tensor, make_result, meta_mode, note_branch, placeholder


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _check_dtype(a, b, "add")
    shape = _broadcast_shape(a, b, "add")
    if meta_mode():
        return make_result(placeholder(shape, a.dtype), (a, b), None, "add")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    else:
        a = _as_tensor(a, b)
    _check_dtype(a, b, "sub")
    shape = _broadcast_shape(a, b, "sub")
    if meta_mode():
        return make_result(placeholder(shape, a.dtype), (a, b), None, "sub")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _check_dtype(a, b, "mul")
    shape = _broadcast_shape(a, b, "mul")
    if meta_mode():
        return make_result(placeholder(shape, a.dtype), (a, b), None, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    if meta_mode():
        return make_result(placeholder(x.shape, x.dtype), (x,), None, "relu")
    mask = x.data > 0
    note_branch(mask)
    return make_result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    if meta_mode():
        return make_result(placeholder(x.shape, x.dtype), (x,), None, "sigmoid")
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    kshape = _reduced_shape(x.shape, axes, True)
    if meta_mode():
        return make_result(placeholder(_reduced_shape(x.shape, axes, keepdims), x.dtype), (x,),
                           None, "sum")
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return make_result(np.asarray(out), (x,),
                       lambda g: (np.broadcast_to(g.reshape(kshape), shape),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    kshape = _reduced_shape(x.shape, axes, True)
    if meta_mode():
        return make_result(placeholder(_reduced_shape(x.shape, axes, keepdims), x.dtype), (x,),
                           None, "mean")
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)
    scale = x.dtype.type(1.0 / count)
    return make_result(np.asarray(out, dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g.reshape(kshape) * scale, shape),), "mean")


def amax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis (kept).  Ties route the gradient to the lowest index."""
    axis = _norm_axis(axis, x.ndim)[0]
    oshape = _reduced_shape(x.shape, (axis,), True)
    if meta_mode():
        return make_result(placeholder(oshape, x.dtype), (x,), None, "amax")
    idx = np.argmax(x.data, axis=axis)  # first occurrence on ties
    note_branch(idx)
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_result(out, (x,), backward, "amax")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.size % known:
            raise ValueError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} to {shape}")
    if meta_mode():
        return make_result(placeholder(shape, x.dtype), (x,), None, "reshape")
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)[0]
    for t in tensors[1:]:
        _check_dtype(ref, t, "concat")
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ValueError(f"concat: shape {t.shape} incompatible with {ref.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    if meta_mode():
        shape = list(ref.shape)
        shape[axis] = int(np.sum(sizes))
        return make_result(placeholder(shape, ref.dtype), tensors, None, "concat")
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward,
                       "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    axis = _norm_axis(axis, x.ndim)[0]
    sizes = [int(s) for s in sizes]
    if any(s <= 0 for s in sizes) or int(np.sum(sizes)) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not partition axis {axis} of {x.shape}")
    outs = []
    start = 0
    for s in sizes:
        outs.append(_slice(x, axis, start, start + s))
        start += s
    return outs


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    if meta_mode():
        shape = list(x.shape)
        shape[axis] = stop - start
        return make_result(placeholder(shape, x.dtype), (x,), None, "slice")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_result(x.data[index], (x,), backward, "slice")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _norm_axis(axis, x.ndim)[0]
    if start < 0 or length <= 0 or start + length > x.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] out of range for axis size {x.shape[axis]}")
    return _slice(x, axis, start, start + length)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    _check_dtype(x, weight, "linear")
    parents = (x, weight) if bias is None else (x, weight, bias)
    if meta_mode():
        return make_result(placeholder((x.shape[0], weight.shape[0]), x.dtype), parents, None,
                           "linear")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, parents, backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


def mse_loss(pred: Tensor, target, weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean of ``weight * (pred - target)**2`` over all elements.

    ``weight`` broadcasts against ``pred`` and is treated as a constant
    (e.g. a per-joint visibility mask of shape (N, K, 1, 1)).
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse_loss: target {target.shape} does not match prediction {pred.shape}")
    if meta_mode():
        return make_result(placeholder((), pred.dtype), (pred,), None, "mse_loss")
    diff = pred.data - target
    w = None
    if weight is not None:
        w = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
    sq = diff * diff if w is None else w * diff * diff
    n = pred.dtype.type(pred.size)
    out = np.asarray(sq.sum(dtype=pred.dtype) / n, dtype=pred.dtype)

    def backward(g):
        gp = (2.0 / n) * diff if w is None else (2.0 / n) * w * diff
        return ((g * gp).astype(pred.dtype, copy=False),)

    return make_result(out, (pred,), backward, "mse_loss")
