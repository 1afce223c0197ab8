"""Stair cell, mix attention and the image transformation block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from .tensor import ConvSpec, Tensor, amax, concat, global_avg_pool, mean, relu, reshape, sigmoid


def stc_branch_widths(width: int, branch_count: int = 4) -> List[int]:
    """Halving width schedule of a stair cell: C/2, C/4, ..., C/2^(c-1), C/2^(c-1).

    The last two entries are equal so the schedule sums exactly to ``width``.
    """
    if branch_count < 1:
        raise ValueError(f"branch_count must be >= 1, got {branch_count}")
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if branch_count == 1:
        return [width]
    last = 2 ** (branch_count - 1)
    if width % last:
        raise ValueError(
            f"width {width} is not divisible by 2^(branch_count-1) = {last}; "
            "the halving schedule would not sum to the cell width"
        )
    widths = [width >> j for j in range(1, branch_count)]
    widths.append(widths[-1])
    return widths


def reduction_rate(width: int) -> int:
    """Channel-attention reduction; grows with width so the squeeze stays small."""
    return max(2, width // 16)


@dataclass(frozen=True)
class MixAttentionConfig:
    width: int
    reduction: Optional[int] = None
    spatial_kernel: int = 7

    def __post_init__(self):
        r = reduction_rate(self.width) if self.reduction is None else self.reduction
        if r < 1:
            raise ValueError(f"reduction rate must be >= 1, got {r}")
        if self.width // r < 2:
            raise ValueError(
                f"channel attention on width {self.width} with reduction {r} leaves "
                f"{self.width // r} < 2 hidden units"
            )
        object.__setattr__(self, "reduction", r)

    @property
    def hidden(self) -> int:
        return self.width // self.reduction


@dataclass(frozen=True)
class StcConfig:
    """Stair cell layout.

    ``halving=False`` gives every layer the full width; the layer outputs
    are then summed (instead of concatenated) so the skip still matches.
    """

    width: int
    branch_count: int = 4
    base_dilation: int = 1
    depthwise: bool = False
    attention: bool = True
    halving: bool = True
    kernel: int = 3

    def __post_init__(self):
        if self.base_dilation < 1:
            raise ValueError(f"base_dilation must be >= 1, got {self.base_dilation}")
        self.widths  # validates divisibility

    @property
    def widths(self) -> List[int]:
        if not self.halving:
            if self.branch_count < 1:
                raise ValueError(f"branch_count must be >= 1, got {self.branch_count}")
            return [self.width] * self.branch_count
        return stc_branch_widths(self.width, self.branch_count)

    @property
    def dilations(self) -> List[int]:
        return [self.base_dilation + j for j in range(self.branch_count)]


class ConvBN(nn.Module):
    """Bias-free convolution followed by batch norm and an optional ReLU."""

    def __init__(self, spec: ConvSpec, act: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        if spec.bias:
            raise ValueError("ConvBN convolutions carry no bias (batch norm absorbs it)")
        self.conv = nn.Conv2d(spec, rng, dtype)
        self.bn = nn.BatchNorm2d(spec.out_channels, dtype=dtype)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.act else y


class StairLayer(nn.Module):
    """One atrous step of a stair cell, optionally depthwise separable."""

    def __init__(self, c_in: int, c_out: int, dilation: int, depthwise: bool, kernel: int = 3,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.depthwise = depthwise
        if depthwise:
            self.dw = nn.Conv2d(ConvSpec(c_in, c_in, kernel, dilation=dilation, groups=c_in,
                                         bias=False), rng, dtype)
            self.pw = ConvBN(ConvSpec(c_in, c_out, 1, bias=False), rng=rng, dtype=dtype)
        else:
            self.conv = ConvBN(ConvSpec(c_in, c_out, kernel, dilation=dilation, bias=False),
                               rng=rng, dtype=dtype)

    def forward(self, x):
        if self.depthwise:
            return self.pw(self.dw(x))
        return self.conv(x)


class MixAttention(nn.Module):
    """Channel gate (squeeze, reduced MLP, sigmoid) then spatial gate
    (channel mean and max masks, 7x7 conv, sigmoid).

    The final layer of each gate starts at zero.
    """

    def __init__(self, cfg: MixAttentionConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.fc1 = nn.Linear(cfg.width, cfg.hidden, rng, dtype)
        self.fc2 = nn.Linear(cfg.hidden, cfg.width, None, dtype)
        k = cfg.spatial_kernel
        self.spatial = nn.Conv2d(ConvSpec(2, 1, k, padding=(k - 1) // 2), None, dtype)

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        s = self.fc2(relu(self.fc1(global_avg_pool(x))))
        return reshape(sigmoid(s), (n, c, 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        masks = concat([mean(x, axis=1, keepdims=True), amax(x, axis=1)], axis=1)
        return sigmoid(self.spatial(masks))

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


class StairCell(nn.Module):
    """Chained atrous convolutions of growing dilation and shrinking width.

    Every layer consumes the previous layer's output; the layer outputs
    are concatenated back to the cell width, reweighted by mix attention and
    added to the input.
    """

    def __init__(self, cfg: StcConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList()
        c_in = cfg.width
        for c_out, d in zip(cfg.widths, cfg.dilations):
            self.layers.append(StairLayer(c_in, c_out, d, cfg.depthwise, cfg.kernel, rng, dtype))
            c_in = c_out
        self.attention = MixAttention(MixAttentionConfig(cfg.width), rng, dtype) if cfg.attention else None
        self.capture = False
        self.taps: Optional[List[Tensor]] = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.width:
            raise ValueError(f"stair cell of width {self.cfg.width} got {x.shape[1]} channels")
        taps = []
        h = x
        for layer in self.layers:
            h = layer(h)
            taps.append(h)
        if self.capture:
            self.taps = taps
        if len(taps) == 1:
            y = taps[0]
        elif self.cfg.halving:
            y = concat(taps, axis=1)
        else:
            y = taps[0]
            for t in taps[1:]:
                y = y + t
        if self.attention is not None:
            y = self.attention(y)
        return x + y


class TransformationBlock(nn.Module):
    """Shallow image-to-feature block: conv3x3, BN+ReLU, conv3x3, BN+ReLU.

    Maps ``in_channels`` to ``out_channels // reduction`` to ``out_channels``
    at unchanged spatial size.
    """

    def __init__(self, out_channels: int, reduction: int = 2, in_channels: int = 3, rng=None,
                 dtype=np.float32):
        super().__init__()
        mid = out_channels // reduction
        if reduction < 1 or mid < 1:
            raise ValueError(
                f"transformation block width {out_channels} with reduction {reduction} "
                "leaves no intermediate channels"
            )
        self.mid_channels = mid
        self.layers = nn.ModuleList([
            nn.Conv2d(ConvSpec(in_channels, mid, 3, bias=False), rng, dtype),
            nn.BatchNorm2d(mid, dtype=dtype),
            nn.Conv2d(ConvSpec(mid, out_channels, 3, bias=False), rng, dtype),
            nn.BatchNorm2d(out_channels, dtype=dtype),
        ])

    def forward(self, x: Tensor) -> Tensor:
        conv1, bn1, conv2, bn2 = self.layers
        return relu(bn2(conv2(relu(bn1(conv1(x))))))


def branch_correlation(taps: Sequence) -> np.ndarray:
    """Pearson correlation between channel-mean-pooled branch responses.

    Entries involving a zero-variance branch are NaN (undefined) rather than
    an error.
    """
    flat = []
    shape = None
    for t in taps:
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"branch taps must be NCHW, got {arr.shape}")
        pooled = arr.mean(axis=1)
        if shape is not None and pooled.shape != shape:
            raise ValueError(f"branch taps are not spatially aligned: {pooled.shape} vs {shape}")
        shape = pooled.shape
        flat.append(pooled.reshape(-1))
    x = np.stack(flat)
    scale = max(1.0, float(np.abs(x).max()))
    x = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((x * x).sum(axis=1))
    # constant responses leave only rounding residue after centring
    norms[norms <= 1e-12 * scale * np.sqrt(x.shape[1])] = 0.0
    m = len(flat)
    out = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(m):
            if norms[i] > 0 and norms[j] > 0:
                out[i, j] = float(np.clip(x[i] @ x[j] / (norms[i] * norms[j]), -1.0, 1.0))
    for i in range(m):
        if norms[i] > 0:
            out[i, i] = 1.0
    # exact symmetry
    iu = np.triu_indices(m, 1)
    out.T[iu] = out[iu]
    return out
