"""Dot-product, factorised-kernel and linear attention over N x D row matrices.

All mechanisms accept 2-D (N x D) or batched 3-D (B x N x D) tensors.  The
linear variant replaces ``exp(q.k)`` by ``1 + q_hat.k_hat`` with L2-normalised
rows, which lets the key/value products be summed once and reused per query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff.init import fan_in_uniform
from .errors import ConfigurationError, DegenerateKernelError, DimensionError
from .layers import Conv2d, Module

DEGENERATE_THRESHOLD = 1e-30
VARIANTS = ("dot_product", "kernel", "linear")

# Mutation switch for the self-test: when set, linear_attention output is perturbed.
_FAULT_INJECTION = False


def set_fault_injection(enabled: bool) -> None:
    global _FAULT_INJECTION
    _FAULT_INJECTION = bool(enabled)


@dataclass(frozen=True)
class AttentionConfig:
    d_k: int
    d_v: int
    variant: str = "linear"
    eps: float = 1e-12

    def __post_init__(self):
        if self.d_k < 1 or self.d_v < 1:
            raise ConfigurationError(f"attention dims must be positive, got d_k={self.d_k}, d_v={self.d_v}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown attention variant {self.variant!r}")

    @classmethod
    def benchmark_default(cls, variant: str = "linear") -> "AttentionConfig":
        # D = D_v = 2 D_k = 64
        return cls(d_k=32, d_v=64, variant=variant)


@dataclass
class ProjectionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape:
            raise DimensionError(f"W_q {self.w_q.shape} and W_k {self.w_k.shape} must share a shape")
        if self.w_q.ndim != 2 or self.w_v.ndim != 2 or self.w_v.shape[0] != self.w_q.shape[0]:
            raise DimensionError(
                f"projection weights disagree on D_x: W_q {self.w_q.shape}, W_v {self.w_v.shape}"
            )

    @classmethod
    def random(cls, rng: np.random.Generator, d_x: int, d_k: int, d_v: int) -> "ProjectionWeights":
        return cls(
            Tensor(fan_in_uniform(rng, (d_x, d_k), d_x), requires_grad=True),
            Tensor(fan_in_uniform(rng, (d_x, d_k), d_x), requires_grad=True),
            Tensor(fan_in_uniform(rng, (d_x, d_v), d_x), requires_grad=True),
        )


def project_qkv(x: Tensor, w: ProjectionWeights):
    if x.shape[-1] != w.w_q.shape[0]:
        raise DimensionError(f"project_qkv: input {x.shape} vs projection D_x {w.w_q.shape[0]}")
    return F.matmul(x, w.w_q), F.matmul(x, w.w_k), F.matmul(x, w.w_v)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return F.permute(x, axes)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query {q.shape} and key {k.shape} differ in D_k")
    if not (q.shape[:-1] == k.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"row counts differ: Q {q.shape}, K {k.shape}, V {v.shape}")


def _guard(den: Tensor) -> None:
    d = den.data.reshape(-1)
    row = int(np.argmin(d))
    if not d[row] > DEGENERATE_THRESHOLD:
        raise DegenerateKernelError(row, float(d[row]))


def dot_product_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """``softmax_rows(Q K^T) V``; materialises the N x N weight matrix."""
    _check_qkv(q, k, v)
    weights = F.softmax_rows(F.matmul(q, _swap_last(k)))
    out = F.matmul(weights, v)
    return (out, weights) if return_weights else out


def kernel_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    phi: Callable[[Tensor], Tensor],
    psi: Callable[[Tensor], Tensor],
) -> Tensor:
    """Attention with similarity ``phi(q)^T psi(k)``, evaluated right-to-left.

    ``psi(K)^T V`` and the column sum of ``psi(K)`` are formed first; each output
    row is then divided by the scalar ``phi(q_i)^T sum_j psi(k_j)``.  The feature
    maps must make every similarity non-negative.
    """
    _check_qkv(q, k, v)
    fq, fk = phi(q), psi(k)
    kv = F.matmul(_swap_last(fk), v)
    ksum = F.sum(fk, axis=-2, keepdims=True)
    num = F.matmul(fq, kv)
    den = F.sum(F.mul(fq, ksum), axis=-1, keepdims=True)
    _guard(den)
    return F.div(num, den)


def taylor_feature_map(eps: float = 1e-12) -> Callable[[Tensor], Tensor]:
    """Row map ``x -> [1, x / (||x|| + eps)]`` whose inner products are ``1 + q_hat.k_hat``."""

    def phi(x: Tensor) -> Tensor:
        ones = Tensor(np.ones(x.shape[:-1] + (1,)))
        return F.concat([ones, F.l2_normalize_rows(x, eps)], axis=-1)

    return phi


def linear_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-12) -> Tensor:
    """First-order Taylor attention in O(N d) time and memory.

    Row i is ``(sum_j v_j + q_hat_i S) / (N + q_hat_i s)`` with
    ``S = K_hat^T V`` (D_k x D_v) and ``s = sum_j k_hat_j`` (D_k).
    No N x N intermediate is formed.
    """
    _check_qkv(q, k, v)
    n = q.shape[-2]
    qn = F.l2_normalize_rows(q, eps)
    kn = F.l2_normalize_rows(k, eps)
    value_sum = F.sum(v, axis=-2, keepdims=True)
    kv = F.matmul(_swap_last(kn), v)
    key_sum = F.sum(kn, axis=-2, keepdims=True)
    num = F.add(F.matmul(qn, kv), value_sum, broadcast=True)
    den = F.add(F.sum(F.mul(qn, key_sum), axis=-1, keepdims=True), float(n), broadcast=True)
    _guard(den)
    out = F.div(num, den)
    if _FAULT_INJECTION:
        out = F.mul(out, 1.0 + 1e-6)
    return out


def linear_attention_oracle(q, k, v, eps: float = 1e-12) -> np.ndarray:
    """Literal double loop over (i, j) of the un-factorised linear attention.

    Quadratic in N; for testing only.  Accepts arrays or tensors, 2-D only.
    """
    q, k, v = (np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in (q, k, v))
    n, d_v = v.shape
    q_hat = [row / (np.sqrt(np.dot(row, row)) + eps) for row in q]
    k_hat = [row / (np.sqrt(np.dot(row, row)) + eps) for row in k]
    out = np.empty((n, d_v))
    for i in range(n):
        num = np.zeros(d_v)
        den = 0.0
        for j in range(n):
            w = 1.0 + float(np.dot(q_hat[i], k_hat[j]))
            num += w * v[j]
            den += w
        if not den > DEGENERATE_THRESHOLD:
            raise DegenerateKernelError(i, den)
        out[i] = num / den
    return out


def oracle_pair_weights(q, k, eps: float = 1e-12) -> np.ndarray:
    """All pairwise similarities ``1 + q_hat_i . k_hat_j`` (N x N), test use only."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    k = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64)
    qh = q / (np.linalg.norm(q, axis=1, keepdims=True) + eps)
    kh = k / (np.linalg.norm(k, axis=1, keepdims=True) + eps)
    return 1.0 + qh @ kh.T


def attend(config: AttentionConfig, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if config.variant == "dot_product":
        return dot_product_attention(q, k, v)
    if config.variant == "kernel":
        fmap = taylor_feature_map(config.eps)
        return kernel_attention(q, k, v, fmap, fmap)
    return linear_attention(q, k, v, config.eps)


class LinearAttentionBlock(Module):
    """Linear attention over the spatial grid of a B x C x H x W map.

    Query/key use C/2 channels and value keeps C, all via 1x1 convolutions.
    """

    def __init__(self, rng, channels: int, eps: float = 1e-12):
        if channels % 2:
            raise ConfigurationError(f"attention block needs an even channel count, got {channels}")
        self.eps = eps
        self.query = Conv2d(rng, channels, channels // 2, 1)
        self.key = Conv2d(rng, channels, channels // 2, 1)
        self.value = Conv2d(rng, channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return lam_block(x, self)


def lam_block(x: Tensor, weights: LinearAttentionBlock) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"lam_block expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    n = h * w

    def rows(t: Tensor) -> Tensor:
        return F.permute(F.reshape(t, (b, t.shape[1], n)), (0, 2, 1))

    q = rows(weights.query(x))
    k = rows(weights.key(x))
    v = rows(weights.value(x))
    out = linear_attention(q, k, v, weights.eps)
    return F.reshape(F.permute(out, (0, 2, 1)), (b, c, h, w))
