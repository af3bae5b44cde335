"""Seeded procedural scenes: rectangles, ellipses and stripes on a flat background."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..autodiff.init import make_rng
from ..errors import ConfigurationError

CLASS_NAMES = ("background", "rectangle", "ellipse", "stripe")

# mean RGB per class; drawn colours are jittered around these
_PALETTE = np.array(
    [
        [0.45, 0.42, 0.32],
        [0.80, 0.32, 0.25],
        [0.32, 0.70, 0.30],
        [0.25, 0.38, 0.80],
    ]
)
COLOR_JITTER = 0.08


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    num_classes: int = 4
    shapes_per_scene: Optional[int] = None  # None: drawn from 2..6 by the seed
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.size not in (64, 128):
            raise ConfigurationError(f"scene size must be 64 or 128, got {self.size}")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigurationError(f"num_classes must be in 2..{len(_PALETTE)}, got {self.num_classes}")
        if self.shapes_per_scene is not None and not 0 <= self.shapes_per_scene <= 6:
            raise ConfigurationError("shapes_per_scene must be in 0..6")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")


def _shape_mask(rng: np.random.Generator, cls: int, size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    kind = (cls - 1) % 3
    if kind == 0:  # axis-aligned rectangle
        h, w = rng.uniform(size / 5, size / 2, size=2)
        cy, cx = rng.uniform(0, size, size=2)
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if kind == 1:  # rotated ellipse
        ry, rx = rng.uniform(size / 7, size / 3.5, size=2)
        cy, cx = rng.uniform(0, size, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    # straight band crossing the image
    half = rng.uniform(size / 20, size / 10)
    cy, cx = rng.uniform(size / 4, 3 * size / 4, size=2)
    theta = rng.uniform(0, np.pi)
    dist = (xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta)
    return np.abs(dist) <= half


def generate_scene(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Return (image 3 x H x W in [0, 1], labels H x W int64), deterministic in ``spec``."""
    rng = make_rng(spec.seed)
    size = spec.size
    n_shapes = int(rng.integers(2, 7)) if spec.shapes_per_scene is None else spec.shapes_per_scene
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    bg = np.clip(_PALETTE[0] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0, 1)
    image = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    labels = np.zeros((size, size), dtype=np.int64)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(rng, cls, size, yy, xx)
        color = np.clip(_PALETTE[cls] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0, 1)
        image[:, mask] = color[:, None]
        labels[mask] = cls
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), labels
