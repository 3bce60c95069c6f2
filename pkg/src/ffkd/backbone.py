"""Per-modality feature extraction and BiFPN refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, functional as F
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, MBConv, Module, param

FUSION_EPS = 1e-4


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int = 2
    expand: int = 4


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple = (
        StageSpec(1, 16, 2, 1),
        StageSpec(2, 24, 2, 4),
        StageSpec(2, 40, 2, 4),
        StageSpec(2, 64, 2, 4),
    )
    width_multiplier: float = 1.0
    pyramid_levels: int = 3
    fpn_channels: int = 32

    def __post_init__(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.pyramid_levels < 1 or self.pyramid_levels > len(self.stages):
            raise ValueError(f"pyramid_levels={self.pyramid_levels} needs at least that many stages")
        strides = [s.stride for s in self.stages]
        if any(s != 2 for s in strides):
            raise ValueError("every stage must downsample by 2")
        if len(self.stages) != self.pyramid_levels + 1:
            raise ValueError("stages must be one more than pyramid_levels "
                             "(the first reaches stride 4, the rest are exported)")

    def scaled(self, c: int) -> int:
        return max(4, int(round(c * self.width_multiplier / 4.0)) * 4)

    @property
    def divisor(self) -> int:
        return 2 ** (self.pyramid_levels + 2)


@dataclass
class FeaturePyramid:
    levels: list
    modality: str = "fused"

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list:
        return [lvl.shape for lvl in self.levels]


class Backbone(Module):
    """Stem conv then MBConv stages; the last ``pyramid_levels`` stages are
    exported through 1x1 lateral projections to ``fpn_channels``."""

    def __init__(self, cfg: BackboneConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        stem = cfg.scaled(cfg.stem_channels)
        self.stem = Conv2d(cfg.in_channels, stem, 3, stride=2, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(stem)
        self.stages = []
        cin = stem
        for spec in cfg.stages:
            cout = cfg.scaled(spec.channels)
            blocks = []
            for b in range(spec.blocks):
                stride = spec.stride if b == 0 else 1
                blocks.append(MBConv(cin, cout, spec.expand, 3, stride, se=spec.expand > 1, rng=rng))
                cin = cout
            self.stages.append(_Stage(blocks))
        exported = [cfg.scaled(s.channels) for s in cfg.stages[-cfg.pyramid_levels:]]
        self.laterals = [_Lateral(c, cfg.fpn_channels, rng) for c in exported]

    def forward(self, image: Tensor, modality: str = "rgb") -> FeaturePyramid:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"backbone expects (N, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        d = self.cfg.divisor
        if h % d or w % d:
            raise ValueError(f"input size {h}x{w} must be divisible by {d} "
                             f"(2^(L+2) for L={self.cfg.pyramid_levels})")
        x = F.hard_swish(self.stem_bn(self.stem(x)))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        feats = feats[-self.cfg.pyramid_levels:]
        return FeaturePyramid([lat(f) for lat, f in zip(self.laterals, feats)], modality)


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class _Lateral(Module):
    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 1, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


def fast_normalized_fusion(inputs: Sequence[Tensor], weights, eps: float = FUSION_EPS) -> Tensor:
    """sum_i w_i x_i / (sum_j w_j + eps) with w = relu(weights)."""
    if len(inputs) < 2:
        raise ValueError(f"fusion needs at least 2 inputs, got {len(inputs)}")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ValueError(f"fusion inputs must share a shape: {shape} vs {t.shape}")
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    if weights.shape != (len(inputs),):
        raise ValueError(f"expected {len(inputs)} fusion weights, got shape {weights.shape}")
    w = F.relu(weights)
    norm = F.div(w, F.add(F.sum(w), eps))
    out = None
    for i, x in enumerate(inputs):
        term = F.mul(x, F.take(norm, [i]))
        out = term if out is None else F.add(out, term)
    return out


def normalized_fusion_weights(raw: np.ndarray, eps: float = FUSION_EPS) -> np.ndarray:
    w = np.maximum(raw, 0)
    return w / (w.sum() + eps)


class _FusionNode(Module):
    """Weighted fusion followed by separable conv, BN and hard-swish."""

    def __init__(self, n_inputs: int, channels: int, rng, activation: bool = True):
        super().__init__()
        self.weights = param(np.ones(n_inputs))
        self.dw = DepthwiseConv2d(channels, 3, rng=rng)
        self.pw = Conv2d(channels, channels, 1, bias=False, rng=rng)
        self.bn = BatchNorm2d(channels)
        self.activation = activation

    def forward(self, inputs):
        h = fast_normalized_fusion(inputs, self.weights)
        h = self.bn(self.pw(self.dw(h)))
        return F.hard_swish(h) if self.activation else h


class BiFPNLayer(Module):
    """One top-down + bottom-up pass over an L-level pyramid (level 0 finest)."""

    def __init__(self, levels: int, channels: int, rng=None, activation: bool = True):
        super().__init__()
        if levels < 2:
            raise ValueError("BiFPN needs at least 2 pyramid levels for cross-scale fusion")
        rng = rng or np.random.default_rng(0)
        self.levels = levels
        # top-down nodes for levels L-2 .. 0, stored finest-first
        self.td_nodes = [_FusionNode(2, channels, rng, activation) for _ in range(levels - 1)]
        # bottom-up nodes for levels 1 .. L-1; the top one has no top-down input
        self.bu_nodes = [_FusionNode(3 if l < levels - 1 else 2, channels, rng, activation)
                         for l in range(1, levels)]

    def forward(self, feats: list) -> list:
        if len(feats) != self.levels:
            raise ValueError(f"BiFPN built for {self.levels} levels, got {len(feats)}")
        L = self.levels
        td = [None] * L
        td[L - 1] = feats[L - 1]
        for l in range(L - 2, -1, -1):
            up = F.upsample_nearest(td[l + 1], feats[l].shape[2:])
            td[l] = self.td_nodes[l]([feats[l], up])
        out = [None] * L
        out[0] = td[0]
        for l in range(1, L):
            down = F.max_pool2d(out[l - 1])
            ins = [feats[l], td[l], down] if l < L - 1 else [feats[l], down]
            out[l] = self.bu_nodes[l - 1](ins)
        return out

    def nodes(self) -> list:
        return list(self.td_nodes) + list(self.bu_nodes)


class BiFPN(Module):
    def __init__(self, levels: int, channels: int, iterations: int = 1, rng=None,
                 activation: bool = True):
        super().__init__()
        if iterations < 1:
            raise ValueError(f"BiFPN iterations must be >= 1, got {iterations}")
        rng = rng or np.random.default_rng(0)
        self.layers = [BiFPNLayer(levels, channels, rng, activation) for _ in range(iterations)]

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        feats = list(pyramid.levels)
        for layer in self.layers:
            feats = layer(feats)
        return FeaturePyramid(feats, pyramid.modality)

    def normalized_weights(self) -> list[np.ndarray]:
        return [normalized_fusion_weights(node.weights.data)
                for layer in self.layers for node in layer.nodes()]
