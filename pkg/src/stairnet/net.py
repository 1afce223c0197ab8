"""STair Unit, inter-stage MDBS wiring, STair Fusion and the full network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .blocks import ConvBN, StairCell, StcConfig, TransformationBlock
from .tensor import ConvSpec, Tensor, concat, narrow, pool2d, relu, resize_bilinear


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class StuConfig:
    trunk_width: int = 32
    branches: int = 4
    stc_branches: int = 4
    depthwise: bool = False
    attention: bool = True
    channel_halving: bool = True

    @property
    def widths(self) -> List[int]:
        return [self.trunk_width << b for b in range(self.branches)]

    @property
    def blocks(self) -> List[int]:
        return [self.branches - b for b in range(self.branches)]

    def stc_config(self, b: int) -> StcConfig:
        # branch b (0-based) starts at dilation b + 1: kernels 3-9, 5-11, ...
        return StcConfig(self.widths[b], self.stc_branches, base_dilation=b + 1,
                         depthwise=self.depthwise, attention=self.attention,
                         halving=self.channel_halving)


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 1
    trunk_width: int = 32
    input_size: Tuple[int, int] = (256, 192)
    mdbs: bool = True
    stf: bool = True
    attention: bool = True
    channel_halving: bool = True
    depthwise: bool = False
    num_joints: int = 17
    stc_branches: int = 4
    stem_width: Optional[int] = None
    stem_blocks: int = 4
    stf_reduction: int = 2
    stf_proj_kernel: int = 3
    deconv_kernel: int = 4
    mdbs_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.stem_width is None:
            object.__setattr__(self, "stem_width", 2 * self.trunk_width)
        self.validate()

    def validate(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(isinstance(self.stages, int) and self.stages >= 1, "stages",
             f"must be an int >= 1, got {self.stages!r}")
        need(len(self.input_size) == 2, "input_size", "expects (height, width)")
        for v, name in zip(self.input_size, ("input_size[0]", "input_size[1]")):
            need(v > 0 and v % 32 == 0, name, f"{v} is not a positive multiple of 32")
        need(isinstance(self.trunk_width, int) and self.trunk_width >= 4 and self.trunk_width % 2 == 0,
             "trunk_width", f"must be an even int >= 4, got {self.trunk_width!r}")
        if self.channel_halving and self.stc_branches > 1:
            last = 2 ** (self.stc_branches - 1)
            need(self.trunk_width % last == 0, "trunk_width",
                 f"{self.trunk_width} not divisible by {last} for {self.stc_branches} stair branches")
        need(isinstance(self.stc_branches, int) and self.stc_branches >= 1, "stc_branches",
             f"must be an int >= 1, got {self.stc_branches!r}")
        need(self.num_joints >= 1, "num_joints", f"must be >= 1, got {self.num_joints}")
        need(self.stem_width >= 1, "stem_width", f"must be >= 1, got {self.stem_width}")
        need(self.stem_blocks >= 0, "stem_blocks", f"must be >= 0, got {self.stem_blocks}")
        need(self.stf_reduction >= 1 and self.trunk_width // self.stf_reduction >= 1, "stf_reduction",
             f"{self.stf_reduction} leaves no transformation channels")
        need(self.stf_proj_kernel % 2 == 1, "stf_proj_kernel", "must be odd")
        need(self.mdbs_kernel % 2 == 1, "mdbs_kernel", "must be odd")
        need(self.deconv_kernel >= 2 and self.deconv_kernel % 2 == 0, "deconv_kernel",
             "must be even and >= 2 so a stride-2 step exactly doubles the size")

    @property
    def unit(self) -> StuConfig:
        return StuConfig(self.trunk_width, 4, self.stc_branches, self.depthwise, self.attention,
                         self.channel_halving)

    @property
    def growth(self) -> int:
        return self.trunk_width // 2

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        return self.input_size[0] // 4, self.input_size[1] // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


# --- stem ---------------------------------------------------------------------

class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in: int, width: int, rng=None, dtype=np.float32):
        super().__init__()
        c_out = width * self.expansion
        self.conv1 = ConvBN(ConvSpec(c_in, width, 1, bias=False), rng=rng, dtype=dtype)
        self.conv2 = ConvBN(ConvSpec(width, width, 3, bias=False), rng=rng, dtype=dtype)
        self.conv3 = ConvBN(ConvSpec(width, c_out, 1, bias=False), act=False, rng=rng, dtype=dtype)
        self.shortcut = (ConvBN(ConvSpec(c_in, c_out, 1, bias=False), act=False, rng=rng, dtype=dtype)
                         if c_in != c_out else None)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(self.conv3(self.conv2(self.conv1(x))) + skip)


class Stem(nn.Module):
    """Two stride-2 3x3 convs to quarter resolution, bottlenecks, trunk projection."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        super().__init__()
        sw = cfg.stem_width
        self.conv1 = ConvBN(ConvSpec(3, sw, 3, stride=2, padding=1, bias=False), rng=rng, dtype=dtype)
        self.conv2 = ConvBN(ConvSpec(sw, sw, 3, stride=2, padding=1, bias=False), rng=rng, dtype=dtype)
        self.blocks = nn.ModuleList()
        c = sw
        for _ in range(cfg.stem_blocks):
            self.blocks.append(Bottleneck(c, sw, rng, dtype))
            c = sw * Bottleneck.expansion
        self.proj = ConvBN(ConvSpec(c, cfg.trunk_width, 3, bias=False), rng=rng, dtype=dtype)

    def forward(self, x):
        x = self.conv2(self.conv1(x))
        for b in self.blocks:
            x = b(x)
        return self.proj(x)


# --- stair unit -------------------------------------------------------------------

class Downsample(nn.Module):
    """Chain of stride-2 3x3 conv+BN steps, doubling width each step."""

    def __init__(self, widths: Sequence[int], rng=None, dtype=np.float32):
        super().__init__()
        self.steps = nn.ModuleList()
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.steps.append(ConvBN(ConvSpec(a, b, 3, stride=2, padding=1, bias=False), act=not last,
                                     rng=rng, dtype=dtype))

    def forward(self, x):
        for s in self.steps:
            x = s(x)
        return x


class Upsample(nn.Module):
    """1x1 conv+BN width matching followed by bilinear resize."""

    def __init__(self, c_in: int, c_out: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = ConvBN(ConvSpec(c_in, c_out, 1, bias=False), act=False, rng=rng, dtype=dtype)

    def forward(self, x, size):
        return resize_bilinear(self.conv(x), *size)


class StairUnit(nn.Module):
    """Four branches run as a staircase of four columns.

    Column t applies one stair cell to every branch b <= t, fuses all live
    branches into each other, then spawns or feeds branch t+1 through a
    stride-2 conv on branch t.  Branch b therefore runs 4 - b cells.
    """

    def __init__(self, cfg: StuConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        nb = cfg.branches
        self.cells = nn.ModuleList()
        for b in range(nb):
            self.cells.append(nn.ModuleList(
                [StairCell(cfg.stc_config(b), rng, dtype) for _ in range(cfg.blocks[b])]))
        self.fuse = nn.ModuleList()
        for t in range(1, nb):
            col = nn.Module()
            for j in range(t + 1):
                for i in range(t + 1):
                    if i < j:
                        setattr(col, f"d{i}_{j}", Downsample(widths[i:j + 1], rng, dtype))
                    elif i > j:
                        setattr(col, f"u{i}_{j}", Upsample(widths[i], widths[j], rng, dtype))
            self.fuse.append(col)
        self.spawn = nn.ModuleList([
            ConvBN(ConvSpec(widths[t], widths[t + 1], 3, stride=2, padding=1, bias=False),
                   rng=rng, dtype=dtype)
            for t in range(nb - 1)
        ])

    def _fuse(self, t: int, xs: List[Tensor]) -> List[Tensor]:
        col = self.fuse[t - 1]
        out = []
        for j in range(t + 1):
            acc = xs[j]
            for i in range(t + 1):
                if i < j:
                    acc = acc + getattr(col, f"d{i}_{j}")(xs[i])
                elif i > j:
                    acc = acc + getattr(col, f"u{i}_{j}")(xs[i], xs[j].shape[2:])
            out.append(relu(acc))
        return out

    def forward(self, branches: Sequence[Tensor]) -> List[Tensor]:
        nb = self.cfg.branches
        xs = list(branches)
        if not 1 <= len(xs) <= nb:
            raise ValueError(f"stair unit takes 1..{nb} branches, got {len(xs)}")
        for b, x in enumerate(xs):
            want = self.cfg.widths[b]
            if x.shape[1] != want:
                raise ValueError(f"branch {b} has width {x.shape[1]}, unit expects {want}")
        entry_hw = xs[0].shape[2:]
        for t in range(nb):
            for b in range(t + 1):
                xs[b] = self.cells[b][t - b](xs[b])
            if t > 0:
                xs[:t + 1] = self._fuse(t, xs[:t + 1])
            if t < nb - 1:
                new = self.spawn[t](xs[t])
                if len(xs) > t + 1:
                    if xs[t + 1].shape != new.shape:
                        raise ValueError(f"branch {t + 1} shape {xs[t + 1].shape} does not match "
                                         f"downsampled branch {t} {new.shape}")
                    xs[t + 1] = xs[t + 1] + new
                else:
                    xs.append(new)
        assert xs[0].shape[2:] == entry_hw, "branch-1 resolution changed inside a unit"
        return xs


# --- MDBS ---------------------------------------------------------------------------

@dataclass
class MdbsState:
    growth: int
    stage: int = -1
    consolidation: Optional[Tensor] = None
    excavation: List[Tensor] = field(default_factory=list)
    head: Optional[Tensor] = None  # H_i[0:n], consumed by the next stage

    @property
    def output_width(self) -> int:
        return self.growth * (self.stage + 2)


class MdbsStage(nn.Module):
    """Shared conv H_i producing 2n channels plus the 1x1 entry adapter back to trunk width."""

    def __init__(self, trunk: int, growth: int, stage: int, kernel: int = 3, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.stage = stage
        self.growth = growth
        self.h = nn.Conv2d(ConvSpec(trunk, 2 * growth, kernel), rng, dtype)
        cat = growth * (stage + 2)
        self.adapter = nn.Conv2d(ConvSpec(cat, trunk, 1), rng, dtype) if cat != trunk else None

    def forward(self, x: Tensor, state: Optional[MdbsState]) -> Tuple[Tensor, MdbsState]:
        n = self.growth
        if state is None:
            state = MdbsState(n)
        if state.stage != self.stage - 1:
            raise ValueError(f"MDBS stage {self.stage} got state from stage {state.stage}")
        h = self.h(x)
        head, tail = narrow(h, 1, 0, n), narrow(h, 1, n, n)
        cons = head if state.head is None else head + state.head
        exc = [tail] + state.excavation
        nxt = MdbsState(n, self.stage, cons, exc, head)
        assert cons.shape[1] == n
        assert sum(e.shape[1] for e in exc) == n * (self.stage + 1), "excavation width"
        out = concat([cons] + exc, axis=1)
        assert out.shape[1] == nxt.output_width
        if self.adapter is not None:
            out = self.adapter(out)
        return out, nxt


# --- STair Fusion ------------------------------------------------------------------

class StairFusion(nn.Module):
    """Multi-scale image replenishment applied once after the last unit."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        super().__init__()
        widths = cfg.unit.widths
        k = cfg.deconv_kernel
        self.transform = nn.ModuleList()
        self.proj = nn.ModuleList()
        self.deconv = nn.ModuleList()
        for b, w in enumerate(widths):
            self.transform.append(TransformationBlock(w, cfg.stf_reduction, 3, rng, dtype))
            self.proj.append(ConvBN(ConvSpec(2 * w, w, cfg.stf_proj_kernel, bias=False), rng=rng,
                                    dtype=dtype))
            chain = nn.ModuleList()
            for s in range(b, 0, -1):
                step = nn.Module()
                step.up = nn.ConvTranspose2d(
                    ConvSpec(widths[s], widths[s - 1], k, stride=2, padding=(k - 2) // 2, bias=False),
                    rng, dtype)
                step.bn = nn.BatchNorm2d(widths[s - 1], dtype=dtype)
                chain.append(step)
            self.deconv.append(chain)

    def forward(self, image: Tensor, feats: Sequence[Tensor]) -> Tensor:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")
        out = None
        for b, f in enumerate(feats):
            scale = 4 << b
            img = pool2d(image, "avg", scale)
            y = self.proj[b](concat([self.transform[b](img), f], axis=1))
            for step in self.deconv[b]:
                y = relu(step.bn(step.up(y)))
            out = y if out is None else out + y
        return out


# --- network ----------------------------------------------------------------------

class STNet(nn.Module):
    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.stem = Stem(cfg, rng, dtype)
        self.units = nn.ModuleList([StairUnit(cfg.unit, rng, dtype) for _ in range(cfg.stages)])
        self.mdbs = nn.ModuleList()
        if cfg.mdbs:
            for i in range(cfg.stages):
                self.mdbs.append(MdbsStage(cfg.trunk_width, cfg.growth, i, cfg.mdbs_kernel, rng, dtype))
        self.fusion = StairFusion(cfg, rng, dtype) if cfg.stf else None
        self.head = nn.Conv2d(ConvSpec(cfg.trunk_width, cfg.num_joints, 1), rng, dtype)
        self.assign_paths()

    def stair_cells(self) -> List[Tuple[str, StairCell]]:
        return [(p, m) for p, m in self.named_modules() if isinstance(m, StairCell)]

    def features(self, image: Tensor) -> List[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")
        x = self.stem(image)
        trunk_hw = x.shape[2:]
        branches = [x]
        state = None
        for i, unit in enumerate(self.units):
            branches = unit(branches)
            if self.cfg.mdbs:
                branches[0], state = self.mdbs[i](branches[0], state)
            assert branches[0].shape[2:] == trunk_hw, "branch-1 resolution changed"
        return branches

    def forward(self, image: Tensor) -> Tensor:
        branches = self.features(image)
        feat = self.fusion(image, branches) if self.fusion is not None else branches[0]
        return self.head(feat)


def build_model(cfg: ModelConfig, seed: Optional[int] = 0, dtype=np.float32) -> STNet:
    """Construct a network with He-normal weights drawn from ``seed``.

    ``seed=None`` leaves weights at zero (used for shape-only tracing).
    """
    rng = None if seed is None else np.random.default_rng(seed)
    return STNet(cfg, rng, dtype)
