"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``STAIRNET_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python_kernels

try:
    if os.environ.get("STAIRNET_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend forced by STAIRNET_PURE_PYTHON")
    from . import _ckernels as compiled_kernels
except ImportError:
    compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels


def available() -> dict:
    out = {"python": python_kernels}
    if compiled_kernels is not None:
        out["compiled"] = compiled_kernels
    return out


def use(name: str) -> None:
    """Switch the active kernel module ("compiled" or "python")."""
    global kernels
    impls = available()
    if name not in impls:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(impls)}")
    kernels = impls[name]


def active() -> str:
    return kernels.NAME
