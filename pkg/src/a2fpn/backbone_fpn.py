"""Scratch residual backbone (C2-C5) and the top-down feature pyramid (P2-P5, S2-S5)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .autodiff import Tensor
from .autodiff import functional as F
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, ConvBNReLU, Module


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    pyramid_channels: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ConfigurationError("backbone needs exactly four stages")
        if min(self.stage_channels) < 1 or self.stem_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigurationError("backbone widths and depth must be positive")
        if self.pyramid_channels < 2 or self.pyramid_channels % 2:
            raise ConfigurationError("pyramid_channels must be an even integer >= 2")


@dataclass
class PyramidMaps:
    C: List[Tensor]
    P: List[Tensor]
    S: List[Tensor]

    def validate(self, d_p: int) -> None:
        for c, p in zip(self.C, self.P):
            if c.shape[2:] != p.shape[2:]:
                raise DimensionError(f"C/P spatial mismatch {c.shape} vs {p.shape}")
        for s in self.S:
            if s.shape[2:] != self.P[0].shape[2:] or s.shape[1] != d_p:
                raise DimensionError(f"S map {s.shape} is not at P2 scale with {d_p} channels")


class ResidualBlock(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int):
        self.conv1 = ConvBNReLU(rng, cin, cout, 3, stride)
        self.conv2 = ConvBNReLU(rng, cout, cout, 3, 1, act=False)
        self.proj = ConvBNReLU(rng, cin, cout, 1, stride, act=False) if (cin != cout or stride != 1) else None

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.proj is None else self.proj(x)
        return F.relu(F.add(self.conv2(self.conv1(x)), skip))


class Backbone(Module):
    def __init__(self, rng, cfg: BackboneConfig):
        self.cfg = cfg
        self.stem = ConvBNReLU(rng, 3, cfg.stem_channels, 3, stride=2)
        self.stages = []
        cin = cfg.stem_channels
        for cout in cfg.stage_channels:
            blocks = [ResidualBlock(rng, cin, cout, 2)]
            blocks += [ResidualBlock(rng, cout, cout, 1) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(_Stage(blocks))
            cin = cout

    def forward(self, x: Tensor) -> List[Tensor]:
        return backbone_forward(x, self)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def backbone_forward(x: Tensor, backbone: Backbone) -> List[Tensor]:
    """Return [C2, C3, C4, C5] at 1/4 .. 1/32 of the input extent."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"backbone expects B x 3 x H x W, got {x.shape}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ConfigurationError(f"input extents {x.shape[2:]} must be divisible by 32")
    h = backbone.stem(x)
    feats = []
    for stage in backbone.stages:
        h = stage(h)
        feats.append(h)
    return feats


def lateral_project(c: Tensor, conv: Conv2d) -> Tensor:
    return conv(c)


def topdown_merge(upper: Tensor, lateral: Tensor) -> Tensor:
    if tuple(2 * n for n in upper.shape[2:]) != lateral.shape[2:]:
        raise DimensionError(f"top-down merge: upper {upper.shape} is not half of lateral {lateral.shape}")
    return F.add(F.upsample_nearest2x(upper), lateral)


def smooth_3x3(merged: Tensor, conv: Conv2d) -> Tensor:
    return conv(merged)


def scale_to_finest(p: Tensor, level: int, block: ConvBNReLU) -> Tensor:
    """3x3 conv-norm-relu, then (level - 2) nearest 2x upsamplings."""
    if level not in (2, 3, 4, 5):
        raise ConfigurationError(f"pyramid level must be in 2..5, got {level}")
    s = block(p)
    for _ in range(level - 2):
        s = F.upsample_nearest2x(s)
    return s


class FeaturePyramid(Module):
    def __init__(self, rng, cfg: BackboneConfig):
        d_p = cfg.pyramid_channels
        self.d_p = d_p
        self.lateral = [Conv2d(rng, c, d_p, 1) for c in cfg.stage_channels]
        self.smooth = [Conv2d(rng, d_p, d_p, 3) for _ in range(3)]
        self.to_finest = [ConvBNReLU(rng, d_p, d_p, 3) for _ in range(4)]

    def forward(self, feats: Sequence[Tensor]) -> PyramidMaps:
        c2, c3, c4, c5 = feats
        p5 = lateral_project(c5, self.lateral[3])
        ps = [p5]
        for i, c in ((2, c4), (1, c3), (0, c2)):
            merged = topdown_merge(ps[0], lateral_project(c, self.lateral[i]))
            ps.insert(0, smooth_3x3(merged, self.smooth[i]))
        ss = [scale_to_finest(p, lvl, blk) for lvl, p, blk in zip((2, 3, 4, 5), ps, self.to_finest)]
        return PyramidMaps(C=list(feats), P=ps, S=ss)
