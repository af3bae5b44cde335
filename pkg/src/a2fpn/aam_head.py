"""Attention aggregation, classifier head, and the three ablation models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .attention import LinearAttentionBlock, lam_block
from .autodiff import Tensor
from .autodiff import functional as F
from .autodiff.init import make_rng
from .backbone_fpn import Backbone, BackboneConfig, FeaturePyramid, backbone_forward
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, ConvBNReLU, Module

KINDS = ("baseline", "fpn", "a2fpn")


@dataclass(frozen=True)
class ModelVariant:
    kind: str = "a2fpn"
    num_classes: int = 4
    d_p: int = 64
    backbone: BackboneConfig = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if self.backbone is None:
            object.__setattr__(self, "backbone", BackboneConfig(pyramid_channels=self.d_p))
        elif self.backbone.pyramid_channels != self.d_p:
            raise ConfigurationError("backbone.pyramid_channels must equal d_p")


class AttentionAggregation(Module):
    def __init__(self, rng, d_p: int):
        self.fuse = Conv2d(rng, 4 * d_p, 4 * d_p, 1)
        self.lam = LinearAttentionBlock(rng, 4 * d_p)

    def forward(self, s_maps: Sequence[Tensor]) -> Tensor:
        return aam_forward(s_maps, self)


def aam_forward(s_maps: Sequence[Tensor], weights: AttentionAggregation) -> Tensor:
    """concat(S2..S5) -> 1x1 conv -> linear attention, plus the concatenation as residual."""
    if len(s_maps) != 4:
        raise DimensionError(f"expected four S maps, got {len(s_maps)}")
    ref = s_maps[0].shape
    if any(s.shape != ref for s in s_maps):
        raise DimensionError(f"S maps differ in shape: {[s.shape for s in s_maps]}")
    fused = F.concat_channels(s_maps)
    refined = lam_block(weights.fuse(fused), weights.lam)
    return F.add(refined, fused)


class ClassifierHead(Module):
    def __init__(self, rng, cin: int, num_classes: int):
        self.conv = Conv2d(rng, cin, num_classes, 1)

    def forward(self, x: Tensor) -> Tensor:
        return classifier_head(x, self)


def classifier_head(x: Tensor, head: ClassifierHead) -> Tensor:
    return F.upsample_nearest2x(F.upsample_nearest2x(head.conv(x)))


class _SegmentationModel(Module):
    kind = ""

    def __init__(self, variant: ModelVariant, seed: int):
        self.variant = variant
        self.seed = seed

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class A2FPN(_SegmentationModel):
    kind = "a2fpn"

    def __init__(self, variant: ModelVariant, seed: int = 0):
        super().__init__(variant, seed)
        rng = make_rng(seed)
        d_p = variant.d_p
        self.backbone = Backbone(rng, variant.backbone)
        self.pyramid = FeaturePyramid(rng, variant.backbone)
        self.aam = AttentionAggregation(rng, d_p)
        self.head = ClassifierHead(rng, 4 * d_p, variant.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return a2fpn_forward(x, self)


def a2fpn_forward(x: Tensor, model: A2FPN) -> Tensor:
    maps = model.pyramid(backbone_forward(x, model.backbone))
    return classifier_head(aam_forward(maps.S, model.aam), model.head)


class FPNModel(_SegmentationModel):
    """A2FPN without the attention branch and residual: 1x1 conv over concat(S2..S5)."""

    kind = "fpn"

    def __init__(self, variant: ModelVariant, seed: int = 0):
        super().__init__(variant, seed)
        rng = make_rng(seed)
        d_p = variant.d_p
        self.backbone = Backbone(rng, variant.backbone)
        self.pyramid = FeaturePyramid(rng, variant.backbone)
        self.fuse = Conv2d(rng, 4 * d_p, 4 * d_p, 1)
        self.head = ClassifierHead(rng, 4 * d_p, variant.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        maps = self.pyramid(backbone_forward(x, self.backbone))
        return classifier_head(self.fuse(F.concat_channels(maps.S)), self.head)


class BaselineModel(_SegmentationModel):
    """Plain encoder-decoder: backbone, then three (conv3x3-norm-relu, 2x upsample) steps from C5."""

    kind = "baseline"

    def __init__(self, variant: ModelVariant, seed: int = 0):
        super().__init__(variant, seed)
        rng = make_rng(seed)
        d_p = variant.d_p
        self.backbone = Backbone(rng, variant.backbone)
        cin = variant.backbone.stage_channels[-1]
        self.decoder = [ConvBNReLU(rng, cin if i == 0 else d_p, d_p, 3) for i in range(3)]
        self.head = ClassifierHead(rng, d_p, variant.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        h = backbone_forward(x, self.backbone)[-1]
        for block in self.decoder:
            h = F.upsample_nearest2x(block(h))
        return classifier_head(h, self.head)


_MODELS = {"a2fpn": A2FPN, "fpn": FPNModel, "baseline": BaselineModel}


def build_model(variant: ModelVariant, seed: int = 0) -> _SegmentationModel:
    return _MODELS[variant.kind](variant, seed)


def ablation_forward(x: Tensor, model: _SegmentationModel) -> Tensor:
    return model(x)
