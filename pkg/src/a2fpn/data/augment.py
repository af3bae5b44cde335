"""Joint image/label augmentation and the dihedral transforms used by TTA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class AugmentationPolicy:
    rotations: Tuple[int, ...] = (0, 1, 2, 3)  # quarter turns
    hflip: bool = True
    vflip: bool = True
    scales: Tuple[float, ...] = (0.75, 1.0, 1.25)
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(rotations=(0,), hflip=False, vflip=False, scales=(1.0,), noise_sigma=0.0)


def rotate90(a: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(a, k, axes=(-2, -1))


def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., :, ::-1]


def vflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :]


def rescale_nearest(a: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour rescale of the last two axes, then centre crop / edge pad to the input extent."""
    h, w = a.shape[-2:]
    if factor == 1.0:
        return a
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    rows = np.minimum(((np.arange(nh) + 0.5) / factor).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) / factor).astype(np.intp), w - 1)
    out = a[..., rows, :][..., cols]
    return _fit(out, h, w)


def _fit(a: np.ndarray, h: int, w: int) -> np.ndarray:
    ah, aw = a.shape[-2:]
    if ah >= h:
        top = (ah - h) // 2
        a = a[..., top : top + h, :]
    if aw >= w:
        left = (aw - w) // 2
        a = a[..., :, left : left + w]
    ph, pw = h - a.shape[-2], w - a.shape[-1]
    if ph > 0 or pw > 0:
        pad = [(0, 0)] * (a.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
        a = np.pad(a, pad, mode="edge")
    return a


def augment(image: np.ndarray, labels: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    """Sample one transform from ``policy`` and apply it to image (C x H x W) and labels (H x W).

    Geometry is applied to both; noise only to the image.  The draw order is
    fixed so a seeded generator reproduces the same sequence of transforms.
    """
    k = int(policy.rotations[rng.integers(len(policy.rotations))])
    do_h = policy.hflip and bool(rng.integers(2))
    do_v = policy.vflip and bool(rng.integers(2))
    scale = float(policy.scales[rng.integers(len(policy.scales))])

    img, lab = image, labels
    if k % 4:
        img, lab = rotate90(img, k), rotate90(lab, k)
    if do_h:
        img, lab = hflip(img), hflip(lab)
    if do_v:
        img, lab = vflip(img), vflip(lab)
    if scale != 1.0:
        img, lab = rescale_nearest(img, scale), rescale_nearest(lab, scale)
    if policy.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, policy.noise_sigma, size=img.shape), 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


# dihedral group of the square: (quarter turns, mirror first)
DIHEDRAL = tuple((k, flip) for flip in (False, True) for k in range(4))


def dihedral_forward(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        a = hflip(a)
    return rotate90(a, k)


def dihedral_inverse(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    a = rotate90(a, -k)
    if flip:
        a = hflip(a)
    return a
