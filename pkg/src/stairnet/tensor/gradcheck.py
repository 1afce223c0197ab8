"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .core import Tensor, branch_log, no_grad

FLOOR = 1e-8


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(FLOOR, np.abs(numeric))


@dataclass
class GradcheckResult:
    worst: float = 0.0
    per_tensor: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0  # entries whose +-eps probes switched a relu/max branch

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def check_gradients(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], eps: float = 1e-5,
                    max_entries: Optional[int] = None, seed: int = 0,
                    skip_kinks: bool = True) -> GradcheckResult:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    ``tensors`` maps names to tracked leaves read by ``fn``.  With
    ``max_entries`` only that many randomly chosen elements of each tensor
    are perturbed; every tensor is still covered.

    Central differences are only valid where ``fn`` is smooth on
    [x - eps, x + eps].  With ``skip_kinks`` an entry whose perturbed
    evaluations select a different relu mask or argmax than the unperturbed
    one is counted in ``skipped`` and, when sampling, replaced by another entry.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = fn()
    if loss.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    loss.backward()
    with no_grad(), branch_log() as base:
        fn()
    base = list(base)
    rng = np.random.default_rng(seed)
    result = GradcheckResult()
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        analytic = analytic.reshape(-1)
        if not t.data.flags.c_contiguous:
            raise ValueError(f"{name}: gradcheck perturbs in place and needs contiguous data")
        flat = t.data.reshape(-1)
        want = t.size if max_entries is None else min(max_entries, t.size)
        order = rng.permutation(t.size) if max_entries is not None else np.arange(t.size)
        worst = 0.0
        done = 0
        with no_grad():
            for i in order:
                if done >= want:
                    break
                orig = flat[i]
                with branch_log() as lp:
                    flat[i] = orig + eps
                    fp = float(fn().data)
                with branch_log() as lm:
                    flat[i] = orig - eps
                    fm = float(fn().data)
                flat[i] = orig
                if skip_kinks and (lp != base or lm != base):
                    result.skipped += 1
                    continue
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, float(relative_error(analytic[i], numeric)))
                done += 1
        result.per_tensor[name] = worst
        result.worst = max(result.worst, worst)
        result.checked += done
    return result
