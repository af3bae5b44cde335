"""Registered oracle properties run by ``a2fpn selftest``.

Each property returns its measured error; it passes when that error is within
the registered tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .aam_head import ModelVariant, build_model
from .attention import (
    dot_product_attention,
    kernel_attention,
    lam_block,
    linear_attention,
    linear_attention_oracle,
    taylor_feature_map,
    LinearAttentionBlock,
)
from .autodiff import Tensor, finite_difference_check, no_grad
from .autodiff import functional as F
from .autodiff.init import make_rng
from .backbone_fpn import BackboneConfig
from .bench import macc_model
from .data.augment import DIHEDRAL, dihedral_forward, dihedral_inverse
from .data.tta import softmax_classes, tta_predict
from .metrics import ConfusionMatrix, f1_scores, mean_iou, overall_accuracy


def relative_error(got: np.ndarray, ref: np.ndarray) -> float:
    """max |got - ref| / max |ref| (infinity-norm relative error)."""
    scale = float(np.abs(ref).max()) if np.size(ref) else 0.0
    diff = float(np.abs(np.asarray(got) - np.asarray(ref)).max()) if np.size(ref) else 0.0
    return diff / scale if scale > 0 else diff


@dataclass(frozen=True)
class Property:
    name: str
    tolerance: float
    measure: Callable[[], float]


def linear_equivalence_error(instances: int = 100, seed: int = 0) -> float:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 65))
        d_k = int(rng.integers(1, 17))
        d_v = int(rng.integers(1, 17))
        q, k, v = (Tensor(rng.standard_normal((n, d))) for d in (d_k, d_k, d_v))
        worst = max(worst, relative_error(linear_attention(q, k, v).data, linear_attention_oracle(q, k, v)))
    return worst


def kernel_specialisation_error(seed: int = 1) -> float:
    rng = make_rng(seed)
    q, k, v = (Tensor(rng.standard_normal((32, d))) for d in (8, 8, 12))
    fmap = taylor_feature_map()
    return relative_error(kernel_attention(q, k, v, fmap, fmap).data, linear_attention(q, k, v).data)


def softmax_normalisation_error(seed: int = 2) -> float:
    x = Tensor(make_rng(seed).standard_normal((50, 17)) * 10)
    return float(np.abs(F.softmax_rows(x).data.sum(axis=1) - 1.0).max())


def _qkv(rng, n=6, d_k=3, d_v=4):
    return [Tensor(rng.standard_normal((n, d))) for d in (d_k, d_k, d_v)]


def attention_gradcheck_error(kind: str, points: int = 5, seed: int = 42) -> float:
    rng = make_rng(seed)
    fn = dot_product_attention if kind == "dot_product" else linear_attention
    worst = 0.0
    for p in range(points):
        q, k, v = _qkv(rng)
        proj = Tensor(rng.standard_normal((6, 4)))
        worst = max(worst, finite_difference_check(lambda a, b, c: F.sum(F.mul(fn(a, b, c), proj)), [q, k, v], seed=p))
    return worst


def lam_gradcheck_error(points: int = 5, seed: int = 42) -> float:
    rng = make_rng(seed)
    worst = 0.0
    for p in range(points):
        block = LinearAttentionBlock(rng, 4)
        x = Tensor(rng.standard_normal((1, 4, 3, 3)))
        proj = Tensor(rng.standard_normal((1, 4, 3, 3)))
        params = [x] + block.parameters()
        worst = max(
            worst,
            finite_difference_check(lambda *ts: F.sum(F.mul(lam_block(ts[0], block), proj)), params, seed=p),
        )
    return worst


def metric_oracle_error() -> float:
    cm = ConfusionMatrix(2, [[3, 1], [2, 4]])
    _, mean_f1 = f1_scores(cm)
    expected = (0.7, (3 / 6 + 4 / 7) / 2, (2 * 0.6 * 0.75 / 1.35 + 2 * 0.8 * (4 / 6) / (0.8 + 4 / 6)) / 2)
    got = (overall_accuracy(cm), mean_iou(cm), mean_f1)
    perfect = ConfusionMatrix(3, np.diag([5, 7, 2]))
    perfect_err = max(abs(1.0 - overall_accuracy(perfect)), abs(1.0 - mean_iou(perfect)), abs(1.0 - f1_scores(perfect)[1]))
    return max(max(abs(a - b) for a, b in zip(got, expected)), perfect_err)


def tiny_variant(kind: str = "a2fpn", num_classes: int = 3) -> ModelVariant:
    bb = BackboneConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), blocks_per_stage=1, pyramid_channels=4)
    return ModelVariant(kind, num_classes, 4, bb)


def tta_expansion_error(seed: int = 3) -> float:
    model = build_model(tiny_variant(), seed).eval()
    image = make_rng(seed).random((3, 32, 32))
    got = tta_predict(model, image)
    acc = np.zeros_like(got)
    for k, flip in DIHEDRAL:
        with no_grad():
            logits = model(Tensor(dihedral_forward(image, k, flip)[None].copy())).data
        acc += dihedral_inverse(softmax_classes(logits)[0], k, flip)
    return float(np.abs(got - acc / 8).max())


def shape_chain_error() -> float:
    model = build_model(ModelVariant("a2fpn", 4, 8, BackboneConfig(8, (8, 8, 16, 16), 1, 8)), 0).eval()
    with no_grad():
        out = model(Tensor(np.zeros((2, 3, 64, 64))))
    return 0.0 if out.shape == (2, 4, 64, 64) and np.isfinite(out.data).all() else 1.0


def macc_ratio_error() -> float:
    n = 2**16
    dot = macc_model(2 * n, 32, 64, "dot_product") / macc_model(n, 32, 64, "dot_product")
    lin = macc_model(2 * n, 32, 64, "linear") / macc_model(n, 32, 64, "linear")
    return max(abs(dot - 4) / 4, abs(lin - 2) / 2)


PROPERTIES: List[Property] = [
    Property("linear_attention_equivalence", 1e-12, linear_equivalence_error),
    Property("kernel_attention_specialisation", 1e-14, kernel_specialisation_error),
    Property("softmax_row_normalisation", 1e-12, softmax_normalisation_error),
    Property("gradcheck_dot_product_attention", 1e-4, lambda: attention_gradcheck_error("dot_product")),
    Property("gradcheck_linear_attention", 1e-4, lambda: attention_gradcheck_error("linear")),
    Property("gradcheck_lam_block", 1e-4, lam_gradcheck_error),
    Property("metric_oracles", 1e-9, metric_oracle_error),
    Property("tta_expansion", 1e-9, tta_expansion_error),
    Property("shape_chain_a2fpn", 0.0, shape_chain_error),
    Property("macc_scaling_ratios", 0.01, macc_ratio_error),
]


@dataclass
class PropertyResult:
    name: str
    measured: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured)) and self.measured <= self.tolerance


def run_selftest(properties: List[Property] = None) -> List[PropertyResult]:
    results = []
    for prop in properties or PROPERTIES:
        try:
            measured = float(prop.measure())
        except Exception:  # a crashing property is a failing property
            measured = float("inf")
        results.append(PropertyResult(prop.name, measured, prop.tolerance))
    return results
