"""Synthetic moving-shape clips for training and evaluation.

Each clip renders a handful of shapes (rectangles, circles, triangles)
with distinct classes onto a background class, every shape translating
by an integer per-frame velocity. Feature channels are noisy one-hot
encodings of the label grid, so the task is learnable without a deep
backbone. Per-clip RNG streams derive from the root seed by splitting,
so generation is reproducible regardless of worker scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import repeat

import numpy as np

from .errors import ContractError
from .predictions import GroundTruth
from .rng import Rng

BACKGROUND_CLASS = 1
RESAMPLE_ROUNDS = 20

__all__ = ["ClipParams", "Clip", "generate_clip", "flip_clip", "generate_dataset"]


@dataclass
class ClipParams:
    frames: int = 2
    height: int = 32
    width: int = 32
    num_classes: int = 4      # includes the background class
    min_shapes: int = 1
    max_shapes: int = 3
    max_speed: int = 2
    noise_std: float = 0.25

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ContractError("spatial size must be at least 8")
        if self.num_classes < 2:
            raise ContractError("need a background class plus shapes")
        if not 1 <= self.min_shapes <= self.max_shapes <= self.num_classes - 1:
            raise ContractError("shape count must fit the foreground classes")


@dataclass
class Clip:
    features: np.ndarray   # [T, H, W, num_classes]
    labels: np.ndarray     # [T, H, W] ints in {1..K}
    gts: GroundTruth

    @property
    def frames(self) -> int:
        return self.labels.shape[0]


def _sample_geometry(rng: Rng, params: ClipParams) -> dict:
    h, w = params.height, params.width
    size = int(rng.integers(3, max(4, min(h, w) // 3 + 1)))
    return {
        "kind": int(rng.integers(0, 3)),
        "cy": int(rng.integers(2, h - 2)),
        "cx": int(rng.integers(2, w - 2)),
        "size": size,
        "vy": int(rng.integers(-params.max_speed, params.max_speed + 1)),
        "vx": int(rng.integers(-params.max_speed, params.max_speed + 1)),
    }


def _render_shape(geom: dict, frame: int, height: int, width: int) -> np.ndarray:
    cy = geom["cy"] + geom["vy"] * frame
    cx = geom["cx"] + geom["vx"] * frame
    size = geom["size"]
    ys, xs = np.mgrid[0:height, 0:width]
    dy, dx = ys - cy, xs - cx
    if geom["kind"] == 0:    # rectangle
        return (np.abs(dy) <= size) & (np.abs(dx) <= size // 2 + 1)
    if geom["kind"] == 1:    # circle
        return dy * dy + dx * dx <= size * size
    # upward-pointing triangle
    return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (dy + size) / 2)


def _render_labels(shapes: list, classes: np.ndarray,
                   params: ClipParams) -> np.ndarray:
    labels = np.full((params.frames, params.height, params.width),
                     BACKGROUND_CLASS, dtype=np.int64)
    for t in range(params.frames):
        for geom, cls in zip(shapes, classes):
            mask = _render_shape(geom, t, params.height, params.width)
            labels[t][mask] = cls
    return labels


def generate_clip(rng: Rng, params: ClipParams) -> Clip:
    """Render one clip; shapes clipped away entirely are resampled, so
    every emitted instance mask is nonempty."""
    n_shapes = int(rng.integers(params.min_shapes, params.max_shapes + 1))
    classes = 2 + np.sort(rng.choice(params.num_classes - 1, size=n_shapes))
    shapes = [_sample_geometry(rng, params) for _ in range(n_shapes)]

    labels = _render_labels(shapes, classes, params)
    for _ in range(RESAMPLE_ROUNDS):
        missing = [i for i, cls in enumerate(classes)
                   if not (labels == cls).any()]
        if not missing:
            break
        for i in missing:
            shapes[i] = _sample_geometry(rng, params)
        labels = _render_labels(shapes, classes, params)

    present = [c for c in np.unique(labels)]
    gt_labels = np.array(present, dtype=np.int64)
    gt_masks = np.stack([(labels == c).astype(np.float64) for c in present])

    onehot = np.eye(params.num_classes)[labels - 1]
    noise = rng.normal(onehot.shape, std=params.noise_std)
    return Clip(features=onehot + noise, labels=labels,
                gts=GroundTruth(gt_labels, gt_masks))


def flip_clip(clip: Clip) -> Clip:
    """Horizontal flip of features, labels, and instance masks."""
    return Clip(
        features=clip.features[:, :, ::-1, :].copy(),
        labels=clip.labels[:, :, ::-1].copy(),
        gts=GroundTruth(clip.gts.labels.copy(),
                        clip.gts.masks[:, :, :, ::-1].copy()),
    )


def generate_dataset(rng: Rng, params: ClipParams, count: int) -> list:
    """Generate `count` clips from split per-clip streams; THEMASK_THREADS
    caps the worker threads (results are ordered by clip index either way)."""
    streams = [rng.split(i) for i in range(count)]
    workers = max(1, int(os.environ.get("THEMASK_THREADS", "1")))
    if workers == 1 or count <= 1:
        return [generate_clip(s, params) for s in streams]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(generate_clip, streams, repeat(params)))
