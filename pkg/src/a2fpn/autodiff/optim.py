"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Apply one in-place Adam update to ``params`` and advance ``state``."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("adam_step: params, grads and moments differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        if not (p.shape == np.shape(g) == m.shape == v.shape):
            raise DimensionError(f"adam_step: shape mismatch {p.shape} / {np.shape(g)} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state


class Adam:
    """Stateful wrapper reading gradients from ``param.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
