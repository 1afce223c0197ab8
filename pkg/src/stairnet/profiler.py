"""Analytic cost model: parameters, MACs, receptive fields and cost ratios.

Counts come from tracing the network constructor and forward code in
shape-only mode, so the profile and the runnable model cannot drift apart.
MACs cover convolutions and transposed convolutions.  Norms and the
attention MLPs contribute parameters but no MACs, so MACs are exactly
proportional to input area.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .blocks import StairCell, stc_branch_widths
from .net import ModelConfig, STNet
from .tensor import Tensor, meta
from .tensor.core import placeholder

MAC_NOTE = ("FLOPs are multiply-accumulates (MACs) of conv and deconv layers; norms, "
            "attention MLPs, sigmoid gates, channel pooling, resizes and elementwise ops "
            "are not counted")


def receptive_field(k: int, dilation: int) -> int:
    if k < 1 or dilation < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got k={k}, R={dilation}")
    return k + (k - 1) * (dilation - 1)


def halving_ratio(branch_count: int = 4) -> Fraction:
    """Cost of the halved stair schedule relative to one full-width C -> C layer.

    A chained layer of width c_in -> c_out costs c_in * c_out (per tap and pixel).
    """
    if branch_count < 1:
        raise ValueError(f"branch_count must be >= 1, got {branch_count}")
    width = 2 ** (branch_count - 1)
    cost = Fraction(0)
    c_in = width
    for c_out in stc_branch_widths(width, branch_count):
        cost += c_in * c_out
        c_in = c_out
    return cost / (width * width)


def reduction_factor(branch_count: int = 4) -> Fraction:
    """How many times cheaper the halved schedule is than full-width layers."""
    return branch_count / halving_ratio(branch_count)


def depthwise_ratio(k: int, c_out: int) -> Fraction:
    """Depthwise-separable over standard convolution cost: 1/k^2 + 1/C_out."""
    if k < 1 or c_out < 1:
        raise ValueError(f"k and c_out must be >= 1, got k={k}, c_out={c_out}")
    return Fraction(1, k * k) + Fraction(1, c_out)


@dataclass
class CostRow:
    path: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    config: dict
    input_size: Tuple[int, int]
    params: int
    macs: int
    rows: List[CostRow] = field(default_factory=list)
    receptive_fields: Dict[str, List[int]] = field(default_factory=dict)
    ratios: Dict[str, object] = field(default_factory=dict)
    note: str = MAC_NOTE

    def group(self, depth: int = 1) -> Dict[str, Tuple[int, int]]:
        out: Dict[str, Tuple[int, int]] = {}
        for r in self.rows:
            key = ".".join(r.path.split(".")[:depth])
            p, m = out.get(key, (0, 0))
            out[key] = (p + r.params, m + r.macs)
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "input_size": list(self.input_size),
            "totals": {"params": self.params, "macs": self.macs,
                       "params_m": self.params / 1e6, "gmacs": self.macs / 1e9},
            "breakdown": [r.__dict__ for r in self.rows],
            "ratios": {k: (str(v) if isinstance(v, Fraction) else v) for k, v in self.ratios.items()},
            "receptive_fields": self.receptive_fields,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, depth: int = 2) -> str:
        h, w = self.input_size
        lines = [f"input {h}x{w}: {self.params / 1e6:.3f}M params, {self.macs / 1e9:.3f} GMACs",
                 f"note: {self.note}", "", f"{'module':<32}{'params':>12}{'GMACs':>10}"]
        for key, (p, m) in self.group(depth).items():
            lines.append(f"{key:<32}{p:>12,}{m / 1e9:>10.4f}")
        lines.append("")
        lines.append("ratios:")
        for k, v in self.ratios.items():
            shown = f"{v} ({float(v):.4f})" if isinstance(v, Fraction) else f"{v}"
            lines.append(f"  {k}: {shown}")
        lines.append("")
        lines.append("equivalent kernels per stair-unit branch:")
        for k, v in self.receptive_fields.items():
            lines.append(f"  {k}: {', '.join(map(str, v))}")
        return "\n".join(lines)


def stu_receptive_fields(cfg: ModelConfig) -> Dict[str, List[int]]:
    unit = cfg.unit
    out = {}
    for b in range(unit.branches):
        sc = unit.stc_config(b)
        out[f"branch{b + 1}"] = [receptive_field(sc.kernel, d) for d in sc.dilations]
    return out


def trace(model: STNet, input_size: Tuple[int, int], batch: int = 1) -> nn.CostRecorder:
    """Run a shape-only forward pass under a cost recorder."""
    model.assign_paths()
    rec = nn.CostRecorder()
    dtype = model.head.weight.dtype
    was_training = model.training
    model.eval()  # no running-stat updates from the trace
    try:
        with meta(), nn.recording(rec):
            model(Tensor(placeholder((batch, 3) + tuple(input_size), dtype)))
    finally:
        model.train(was_training)
    return rec


def profile(cfg: ModelConfig, input_size: Optional[Sequence[int]] = None) -> CostReport:
    size = tuple(input_size) if input_size is not None else cfg.input_size
    if input_size is not None and tuple(size) != cfg.input_size:
        cfg = ModelConfig(**{**cfg.to_dict(), "input_size": tuple(size)})
    model = STNet(cfg, rng=None)
    rec = trace(model, size)
    rows = [CostRow(p, rec.kinds[p], rec.params[p], rec.macs[p]) for p in rec.order]
    report = CostReport(cfg.to_dict(), size, sum(r.params for r in rows), sum(r.macs for r in rows),
                        rows)
    report.receptive_fields = stu_receptive_fields(cfg)
    report.ratios = {
        "halving_ratio": halving_ratio(cfg.stc_branches),
        "reduction_factor": float(reduction_factor(cfg.stc_branches)),
        "depthwise_ratio_k3_trunk": depthwise_ratio(3, cfg.trunk_width),
    }
    return report


class ParamMismatch(AssertionError):
    pass


def verify_runtime_params(model: STNet, input_size: Optional[Sequence[int]] = None) -> bool:
    """Check the enumerated parameter elements against the traced cost model.

    Raises :class:`ParamMismatch` listing every module whose counts differ.
    """
    size = tuple(input_size) if input_size is not None else model.cfg.input_size
    rec = trace(model, size)
    runtime: Dict[str, int] = {}
    for path, m in model.named_modules():
        n = sum(int(p.size) for p in m._params.values())
        if n:
            runtime[path] = n
    diffs = []
    for path in sorted(set(runtime) | set(rec.params)):
        a, b = runtime.get(path, 0), rec.params.get(path, 0)
        if a != b:
            diffs.append(f"  {path or '<root>'}: runtime {a} vs analytic {b}")
    if diffs:
        raise ParamMismatch("parameter count mismatch:\n" + "\n".join(diffs))
    total = sum(runtime.values())
    if total != model.num_parameters():
        raise ParamMismatch(f"runtime total {model.num_parameters()} vs enumerated {total}")
    return True


def stair_cell_cost(cell: StairCell, hw: Tuple[int, int]) -> Tuple[int, int]:
    """(params, MACs) of a single stair cell at spatial size ``hw``."""
    rec = nn.CostRecorder()
    dtype = cell.parameters()[0].dtype
    saved = {id(m): m._path for _, m in cell.named_modules()}
    cell.assign_paths()
    try:
        with meta(), nn.recording(rec):
            cell(Tensor(placeholder((1, cell.cfg.width) + tuple(hw), dtype)))
    finally:
        for _, m in cell.named_modules():
            object.__setattr__(m, "_path", saved[id(m)])
    return sum(rec.params.values()), sum(rec.macs.values())
