"""Keypoint <-> heatmap conversion, quarter-offset decoding and PCK."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

STRIDE = 4
SIGMA = 2.0


@dataclass
class KeypointSet:
    """K joints as (x, y) pixel coordinates plus visibility flags.

    ``confidence`` and ``low_confidence`` are filled in by :func:`decode`.
    """

    joints: np.ndarray
    visible: np.ndarray
    confidence: Optional[np.ndarray] = None
    low_confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.joints):
            raise ValueError(f"{len(self.joints)} joints but {len(self.visible)} visibility flags")

    def __len__(self):
        return len(self.joints)

    def in_bounds(self, height: int, width: int) -> np.ndarray:
        x, y = self.joints[:, 0], self.joints[:, 1]
        return (x >= 0) & (y >= 0) & (x <= width - 1) & (y <= height - 1)


@dataclass
class HeatmapSet:
    """K confidence grids at 1/stride resolution; ``weights`` masks joints that have targets."""

    grids: np.ndarray
    weights: np.ndarray = field(default=None)
    stride: int = STRIDE

    def __post_init__(self):
        self.grids = np.asarray(self.grids)
        if self.grids.ndim != 3:
            raise ValueError(f"heatmaps must be K x H x W, got {self.grids.shape}")
        if self.weights is None:
            self.weights = np.ones(self.grids.shape[0], dtype=bool)


def _cells(kps: KeypointSet, out_size: Tuple[int, int], stride: int):
    h, w = out_size
    cells = np.rint(kps.joints / stride).astype(np.int64)
    ok = kps.visible & (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < h)
    return cells, ok


def encode_targets(kps: KeypointSet, out_size: Tuple[int, int], sigma: float = SIGMA,
                   stride: int = STRIDE, dtype=np.float32) -> HeatmapSet:
    """Unnormalised Gaussians exp(-d^2 / 2 sigma^2) centred on the quantised joint cell.

    Values beyond 3 sigma are zero.  Invisible joints, and joints whose
    quantised cell falls outside the grid, get an all-zero grid and zero weight.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h, w = out_size
    cells, ok = _cells(kps, out_size, stride)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    grids = np.zeros((len(kps), h, w), dtype=dtype)
    cut = (3.0 * sigma) ** 2
    for j in np.flatnonzero(ok):
        d2 = (xs - cells[j, 0]) ** 2 + (ys - cells[j, 1]) ** 2
        g = np.exp(-d2 / (2.0 * sigma * sigma))
        g[d2 > cut] = 0.0
        grids[j] = g
    return HeatmapSet(grids, ok.copy(), stride)


def decode_array(heatmaps: np.ndarray, stride: int = STRIDE):
    """Vectorised decode of ``(..., K, H, W)`` grids.

    Returns ``(coords[..., K, 2], peak[..., K], low_confidence[..., K])``.
    Per joint: first-index argmax, then a quarter-cell shift on each axis
    toward the strictly larger neighbour (no shift on ties or at borders).
    A constant grid decodes to its centre cell and is flagged.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim < 2 or hm.shape[-1] == 0 or hm.shape[-2] == 0:
        raise ValueError(f"cannot decode empty heatmaps of shape {hm.shape}")
    h, w = hm.shape[-2:]
    lead = hm.shape[:-2]
    flat = hm.reshape(-1, h * w)
    idx = flat.argmax(axis=1)
    peak = flat[np.arange(len(flat)), idx]
    flat_grid = flat.max(axis=1) == flat.min(axis=1)
    py, px = np.divmod(idx, w)
    py = np.where(flat_grid, h // 2, py)
    px = np.where(flat_grid, w // 2, px)
    grid = flat.reshape(-1, h, w)
    rows = np.arange(len(flat))

    def shift(pos, size, get):
        inner = (pos > 0) & (pos < size - 1) & ~flat_grid
        lo = np.where(inner, get(np.clip(pos - 1, 0, size - 1)), 0.0)
        hi = np.where(inner, get(np.clip(pos + 1, 0, size - 1)), 0.0)
        return np.where(inner, 0.25 * np.sign(hi - lo), 0.0)

    dx = shift(px, w, lambda c: grid[rows, py, c])
    dy = shift(py, h, lambda r: grid[rows, r, px])
    coords = np.stack([(px + dx) * stride, (py + dy) * stride], axis=-1)
    return (coords.reshape(lead + (2,)), peak.reshape(lead), flat_grid.reshape(lead))


def decode(heatmaps: Union[HeatmapSet, np.ndarray], stride: Optional[int] = None) -> KeypointSet:
    if isinstance(heatmaps, HeatmapSet):
        stride = heatmaps.stride if stride is None else stride
        heatmaps = heatmaps.grids
    stride = STRIDE if stride is None else stride
    hm = np.asarray(heatmaps)
    if hm.ndim != 3:
        raise ValueError(f"decode expects K x H x W heatmaps, got {hm.shape}")
    coords, peak, low = decode_array(hm, stride)
    return KeypointSet(coords, np.ones(len(coords), dtype=bool), peak, low)


def image_diagonal(height: int, width: int) -> float:
    return math.hypot(height, width)


def pck_counts(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray, threshold: float
               ) -> Tuple[int, int]:
    """(hits, visible) with hits counted on ``distance <= threshold`` (pixels)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    d = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    return int((d[visible] <= threshold).sum()), int(visible.sum())


def pck(pred: Union[KeypointSet, np.ndarray], gt: Union[KeypointSet, np.ndarray],
        threshold_frac: float, norm_size: float, visible: Optional[np.ndarray] = None
        ) -> Optional[float]:
    """Fraction of visible ground-truth joints within ``threshold_frac * norm_size``.

    Returns ``None`` when there are no visible joints (the metric is undefined).
    """
    if isinstance(pred, KeypointSet):
        pred = pred.joints
    if isinstance(gt, KeypointSet):
        visible = gt.visible if visible is None else visible
        gt = gt.joints
    gt = np.asarray(gt, dtype=np.float64)
    if visible is None:
        visible = np.ones(gt.shape[:-1], dtype=bool)
    hits, total = pck_counts(pred, gt, visible, threshold_frac * norm_size)
    if total == 0:
        return None
    return hits / total


def batch_targets(joints: np.ndarray, visible: np.ndarray, out_size: Tuple[int, int],
                  sigma: float = SIGMA, stride: int = STRIDE, dtype=np.float32):
    """Stacked targets and loss weights for ``(N, K, 2)`` joints."""
    maps, weights = [], []
    for j, v in zip(joints, visible):
        hs = encode_targets(KeypointSet(j, v), out_size, sigma, stride, dtype)
        maps.append(hs.grids)
        weights.append(hs.weights)
    return np.stack(maps), np.stack(weights)


def format_table(rows: Sequence[Tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in rows) if rows else 0
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
