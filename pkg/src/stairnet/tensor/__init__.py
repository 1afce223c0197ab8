"""Minimal dense tensor engine with reverse-mode autodiff."""
from . import backend
from .core import DTYPES, Node, Tensor, as_dtype, grad_enabled, meta, meta_mode, no_grad, tensor
from .conv import (
    ConvSpec,
    batchnorm2d,
    bilinear_matrix,
    conv2d,
    conv_transpose2d,
    pool2d,
    resize_bilinear,
)
from .functional import (
    add,
    amax,
    concat,
    global_avg_pool,
    linear,
    mean,
    mse_loss,
    mul,
    narrow,
    relu,
    reshape,
    sigmoid,
    split,
    sub,
)
from .functional import sum as sum_  # noqa: F401
from .gradcheck import GradcheckResult, check_gradients, relative_error

__all__ = [
    "DTYPES", "Node", "Tensor", "as_dtype", "backend", "grad_enabled", "meta", "meta_mode",
    "no_grad", "tensor", "ConvSpec", "batchnorm2d", "bilinear_matrix", "conv2d",
    "conv_transpose2d", "pool2d", "resize_bilinear", "add", "amax", "concat", "global_avg_pool",
    "linear", "mean", "mse_loss", "mul", "narrow", "relu", "reshape", "sigmoid", "split", "sub",
    "GradcheckResult", "check_gradients", "relative_error",
]
