"""Parameter containers and leaf layers.

Leaf layers report their cost to an active :class:`CostRecorder`, which is
how the profiler walks the very same forward code the network runs.
"""
from __future__ import annotations

import contextlib
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import (
    ConvSpec,
    Tensor,
    as_dtype,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    linear,
)


class Parameter(Tensor):
    def __init__(self, data, dtype=None, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True, dtype=dtype,
                         name=name)


class Module:
    """Tree of parameters, buffers and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_path", "")

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # --- traversal -------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for path, m in self.named_modules():
            for name, p in m._params.items():
                yield (f"{path}.{name}" if path else name), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for path, m in self.named_modules():
            for name in m._buffers:
                yield (f"{path}.{name}" if path else name), getattr(m, name)

    def assign_paths(self) -> None:
        for path, m in self.named_modules():
            object.__setattr__(m, "_path", path)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # --- state -------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        dtype = as_dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in list(m._buffers):
                m.register_buffer(name, m._buffers[name].astype(dtype))
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for path, m in self.named_modules():
            for name in m._buffers:
                buffers[f"{path}.{name}" if path else name] = (m, name)
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else getattr(*buffers[name])
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match model {target.shape}")
            if name in params:
                params[name].data = np.array(arr, dtype=target.dtype, copy=True)
            else:
                m, bname = buffers[name]
                m.register_buffer(bname, np.array(arr, dtype=target.dtype, copy=True))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# --- cost recording ------------------------------------------------------------

class CostRecorder:
    """Collects (path, params, macs) from leaf layers during a traced forward.

    Parameters are counted once per layer, MACs once per application.
    """

    def __init__(self):
        self.params: Dict[str, int] = {}
        self.macs: Dict[str, int] = {}
        self.kinds: Dict[str, str] = {}
        self.order: List[str] = []

    def add(self, module: "Module", kind: str, params: int, macs: int) -> None:
        path = module._path
        if path not in self.params:
            self.order.append(path)
            self.params[path] = params
            self.macs[path] = 0
            self.kinds[path] = kind
        self.macs[path] += macs


_recorder: Optional[CostRecorder] = None


@contextlib.contextmanager
def recording(recorder: CostRecorder):
    global _recorder
    prev = _recorder
    _recorder = recorder
    try:
        yield recorder
    finally:
        _recorder = prev


def _he_normal(rng, shape, fan_in, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel ** 2
        self.weight = Parameter(_he_normal(rng, spec.weight_shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype)) if spec.bias else None

    def param_count(self) -> int:
        s = self.spec
        return s.kernel ** 2 * (s.in_channels // s.groups) * s.out_channels + (
            s.out_channels if s.bias else 0)

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.spec, self.bias)
        if _recorder is not None:
            _recorder.add(self, "conv", self.param_count(), self.spec.macs(*out.shape[2:]))
        return out


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = max(1, spec.in_channels * spec.kernel ** 2 // spec.stride ** 2)
        self.weight = Parameter(_he_normal(rng, spec.transpose_weight_shape, fan_in, dtype))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype)) if spec.bias else None

    def param_count(self) -> int:
        s = self.spec
        return s.kernel ** 2 * s.in_channels * (s.out_channels // s.groups) + (
            s.out_channels if s.bias else 0)

    def forward(self, x: Tensor) -> Tensor:
        out = conv_transpose2d(x, self.weight, self.spec, self.bias)
        if _recorder is not None:
            # scatter form: every input pixel feeds k*k*C_out outputs
            s = self.spec
            macs = s.kernel ** 2 * s.in_channels * s.out_channels * x.shape[2] * x.shape[3]
            _recorder.add(self, "deconv", self.param_count(), macs)
        return out


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out = batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)
        if _recorder is not None:
            _recorder.add(self, "norm", 2 * self.channels, 0)
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_he_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out = linear(x, self.weight, self.bias)
        if _recorder is not None:
            # squeeze MLPs run once per image, not per pixel; left out of the MAC
            # total so MACs scale exactly with input area
            n = self.in_features * self.out_features + self.out_features
            _recorder.add(self, "linear", n, 0)
        return out
