"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor, no_grad


def finite_difference_check(
    fn: Callable[..., Tensor],
    point: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
    n_coords: int = 20,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` may be one tensor or a sequence; ``fn`` is called with the tensor(s)
    as positional arguments and must return a scalar.  At most ``n_coords``
    coordinates are sampled (all of them when there are fewer).  The error per
    coordinate is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = fn(*points)
    tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in points]

    sizes = np.array([p.size for p in points])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for fid in flat_ids:
            which = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[which])
            flat = points[which].data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = fn(*points).item()
            flat[idx] = orig - h
            f_minus = fn(*points).item()
            flat[idx] = orig
            central = (f_plus - f_minus) / (2 * h)
            a = analytic[which].reshape(-1)[idx]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return float(worst)
