"""Deterministic synthetic stick-figure pose data.

Sample ``i`` of seed ``s`` is drawn from ``default_rng([s, i])`` alone, so
samples do not depend on how many are generated or in what order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .codec import KeypointSet

NUM_JOINTS = 17
JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
LIMBS = (
    (0, 1), (0, 2), (1, 3), (2, 4), (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16),
)
MIN_SIZE = 64
NOISE = 0.1


def _palette() -> np.ndarray:
    # fixed, well separated joint colours so left and right are distinguishable
    hues = np.arange(NUM_JOINTS) / NUM_JOINTS
    k = (np.array([0.0, 2.0, 4.0])[None, :] + hues[:, None] * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return 0.15 + 0.85 * rgb


PALETTE = _palette()


@dataclass
class SyntheticSample:
    index: int
    seed: int
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    keypoints: KeypointSet


def _skeleton(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """17 joints of a loosely articulated upright figure, in pixels."""
    size = min(h, w)
    scale = size * rng.uniform(0.32, 0.42)
    cx = w * rng.uniform(0.4, 0.6)
    cy = h * rng.uniform(0.45, 0.55)
    tilt = rng.uniform(-0.35, 0.35)
    up = np.array([np.sin(tilt), -np.cos(tilt)])
    side = np.array([-up[1], up[0]])

    def at(base, angle, length):
        d = np.cos(angle) * up + np.sin(angle) * side
        return base + d * length * scale

    neck = np.array([cx, cy]) + up * 0.45 * scale
    pelvis = np.array([cx, cy]) - up * 0.35 * scale
    shoulder_w = rng.uniform(0.22, 0.3)
    hip_w = rng.uniform(0.14, 0.2)
    j = np.zeros((NUM_JOINTS, 2))
    j[5] = neck - side * shoulder_w * scale
    j[6] = neck + side * shoulder_w * scale
    j[11] = pelvis - side * hip_w * scale
    j[12] = pelvis + side * hip_w * scale
    head = at(neck, rng.uniform(-0.3, 0.3), 0.3)
    j[0] = head
    j[1] = head + (up * 0.06 - side * 0.06) * scale
    j[2] = head + (up * 0.06 + side * 0.06) * scale
    j[3] = head - side * 0.12 * scale
    j[4] = head + side * 0.12 * scale
    for s, (sh, el, wr) in ((-1, (5, 7, 9)), (1, (6, 8, 10))):
        a1 = np.pi + s * rng.uniform(0.2, 1.6)
        j[el] = at(j[sh], a1, 0.32)
        j[wr] = at(j[el], a1 + s * rng.uniform(-0.9, 0.9), 0.28)
    for s, (hp, kn, an) in ((-1, (11, 13, 15)), (1, (12, 14, 16))):
        a1 = np.pi + s * rng.uniform(0.0, 0.5)
        j[kn] = at(j[hp], a1, 0.42)
        j[an] = at(j[kn], a1 + s * rng.uniform(-0.5, 0.3), 0.4)
    return j


def _segment_coverage(xs, ys, a, b, radius):
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dx = xs - (a[0] + t * ab[0])
    dy = ys - (a[1] + t * ab[1])
    return np.clip(radius + 0.5 - np.sqrt(dx * dx + dy * dy), 0.0, 1.0)


def render(joints: np.ndarray, visible: np.ndarray, h: int, w: int, rng: np.random.Generator
           ) -> np.ndarray:
    img = np.empty((3, h, w))
    img[:] = rng.uniform(0.05, 0.3, size=3)[:, None, None]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    limb_r = max(1.0, min(h, w) / 64)
    joint_r = max(1.5, min(h, w) / 40)
    limb_colour = rng.uniform(0.45, 0.65, size=3)
    for a, b in LIMBS:
        cov = _segment_coverage(xs, ys, joints[a], joints[b], limb_r)
        img = img * (1 - cov) + limb_colour[:, None, None] * cov
    for k in range(NUM_JOINTS):
        if not visible[k]:
            continue
        cov = _segment_coverage(xs, ys, joints[k], joints[k], joint_r)
        img = img * (1 - cov) + PALETTE[k][:, None, None] * cov
    img = img + rng.uniform(-NOISE, NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(index: int, image_size: Tuple[int, int], seed: int) -> SyntheticSample:
    h, w = image_size
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"image size {h}x{w} is below the {MIN_SIZE}x{MIN_SIZE} minimum")
    rng = np.random.default_rng([int(seed), int(index)])
    joints = _skeleton(rng, h, w)
    inside = (joints[:, 0] >= 0) & (joints[:, 1] >= 0) & (joints[:, 0] <= w - 1) & (joints[:, 1] <= h - 1)
    image = render(joints, inside, h, w, rng)
    return SyntheticSample(index, seed, image, KeypointSet(joints, inside))


def synth_dataset(n: int, image_size: Tuple[int, int], seed: int, start: int = 0
                  ) -> List[SyntheticSample]:
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return [make_sample(start + i, image_size, seed) for i in range(n)]


def stack(samples: Sequence[SyntheticSample]):
    """Arrays ``images (N,3,H,W)``, ``joints (N,K,2)``, ``visible (N,K)``."""
    if not samples:
        raise ValueError("no samples")
    images = np.stack([s.image for s in samples])
    joints = np.stack([s.keypoints.joints for s in samples])
    visible = np.stack([s.keypoints.visible for s in samples])
    return images, joints, visible


def normalize(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to a roughly zero-mean, unit-scale network input."""
    return (images - 0.5) * 4.0


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6 from a (3, H, W) float image in [0, 1]."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError("PPM export needs 3 channels")
    data = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / float(maxval)).astype(np.float32)


def export(samples: Sequence[SyntheticSample], directory: str, split: str = "train") -> str:
    """Write ``<directory>/<split>/`` with one PPM per sample and ``annotations.jsonl``."""
    out = os.path.join(directory, split)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "annotations.jsonl"), "w") as f:
        for s in samples:
            name = f"{s.index:06d}.ppm"
            write_ppm(os.path.join(out, name), s.image)
            f.write(json.dumps({
                "id": s.index, "seed": s.seed, "image": name,
                "joints": s.keypoints.joints.round(4).tolist(),
                "visible": s.keypoints.visible.astype(int).tolist(),
            }) + "\n")
    return out
