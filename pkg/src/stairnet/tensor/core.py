"""Tensor value type and the reverse-mode tape.

Every differentiable operation records a :class:`Node` holding its parents
and a closure mapping the output gradient to parent gradients.  Nodes carry
a monotonically increasing id, so replaying them in descending id order is a
valid reverse topological order for any graph built by eager execution.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
import zlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()
_node_ids = itertools.count(1)


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


def grad_enabled() -> bool:
    return _flag("grad", True)


def meta_mode() -> bool:
    """True while tracing shapes only (no arithmetic is performed)."""
    return _flag("meta", False)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def meta():
    """Run operations on shapes only; outputs are zero-stride placeholders."""
    prev = meta_mode()
    _state.meta = True
    try:
        with no_grad():
            yield
    finally:
        _state.meta = prev


@contextlib.contextmanager
def branch_log():
    """Collect a digest of every piecewise branch choice (relu masks, argmax
    indices) made inside the block.  Finite-difference checks use it to tell
    when a perturbation crossed a kink."""
    prev = getattr(_state, "branches", None)
    log: list = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def note_branch(choice: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(zlib.crc32(np.ascontiguousarray(choice).view(np.uint8)))


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            dtype = DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; only float32/float64 tensors exist")
    return dtype


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("id", "op", "parents", "backward")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = tuple(parents)
        self.backward = backward


class Tensor:
    """Dense N-d array with optional gradient tracking.

    ``data`` is a numpy array of float32 or float64; ``grad`` (when set) has
    the same shape and dtype.  Leaves created with ``requires_grad=True``
    accumulate gradients across :meth:`backward` calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
            data = arr
        self.data = np.asarray(data, dtype=as_dtype(dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- autodiff ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every tracked leaf reachable from this tensor."""
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            if self.requires_grad:
                raise RuntimeError("backward() called on a leaf; there is no graph to replay")
            raise RuntimeError("loss is detached from any tracked leaf (graph already released?)")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        run_backward(self, seed)

    # --- operator sugar (implemented in functional) ----------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def placeholder(shape: Iterable[int], dtype) -> np.ndarray:
    """Zero-stride array standing in for real data under :func:`meta`."""
    return np.broadcast_to(np.zeros((), dtype=as_dtype(dtype)), tuple(int(s) for s in shape))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, recording a tape node when any parent is tracked."""
    if not meta_mode() and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._node = Node(op, parents, backward)
    return out


def run_backward(root: Tensor, seed: np.ndarray) -> None:
    # collect reachable nodes
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in nodes:
            continue
        nodes[node.id] = t
        stack.extend(node.parents)

    grads = {id(root): seed}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        node = t._node
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if node.backward is None:
            raise RuntimeError("graph already released; backward() may run only once per graph")
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                if pg.shape != p.shape:
                    raise RuntimeError(f"gradient shape {pg.shape} does not match leaf {p.shape}")
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.dtype, copy=True)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # release the closure so a second backward over this graph is an error
        node.backward = None
