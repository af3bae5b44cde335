"""Test-time augmentation over the eight symmetries of the square."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..autodiff import Tensor, no_grad
from ..errors import ConfigurationError
from .augment import DIHEDRAL, dihedral_forward, dihedral_inverse


def softmax_classes(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _run(model: Callable, batch: np.ndarray) -> np.ndarray:
    with no_grad():
        out = model(Tensor(np.ascontiguousarray(batch)))
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def single_pass_predict(model: Callable, image: np.ndarray) -> np.ndarray:
    batch = image[None] if image.ndim == 3 else image
    probs = softmax_classes(_run(model, batch))
    return probs[0] if image.ndim == 3 else probs


def tta_predict(model: Callable, image: np.ndarray) -> np.ndarray:
    """Average class probabilities over all 8 dihedral views, mapped back to the input frame.

    ``image`` is C x H x W or B x C x H x W with H == W; the result is K x H x W
    (or B x K x H x W).
    """
    batch = image[None] if image.ndim == 3 else image
    if batch.shape[-1] != batch.shape[-2]:
        raise ConfigurationError(f"TTA needs square inputs, got {batch.shape[-2]} x {batch.shape[-1]}")
    acc = None
    for k, flip in DIHEDRAL:
        probs = softmax_classes(_run(model, dihedral_forward(batch, k, flip)))
        back = dihedral_inverse(probs, k, flip)
        acc = back.copy() if acc is None else acc + back
    acc /= len(DIHEDRAL)
    return acc[0] if image.ndim == 3 else acc
