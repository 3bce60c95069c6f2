"""Cross-modal CBAM fusion of per-level RGB and thermal features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, functional as F
from ..backbone import FeaturePyramid
from ..nn import Conv2d, Module, he_uniform, param


@dataclass
class FusedPyramid:
    levels: list
    channel_gates: list = field(default_factory=list)
    spatial_gates: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)


class CBAMFusion(Module):
    """concat -> channel attention -> spatial attention -> 1x1 projection.

    Channel attention gates the 2C concatenated channels with a shared MLP over
    global average and max descriptors; spatial attention gates positions with a
    k x k conv over the channel-wise mean and max maps.
    """

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c2 = 2 * channels
        r = max(1, c2 // reduction)
        self.channels = channels
        self.w1 = param(he_uniform(rng, (c2, r), c2))
        self.b1 = param(np.zeros(r))
        self.w2 = param(he_uniform(rng, (r, c2), r))
        self.b2 = param(np.zeros(c2))
        self.spatial = Conv2d(2, 1, spatial_kernel, rng=rng)
        self.project = Conv2d(c2, channels, 1, rng=rng)

    def _mlp(self, v: Tensor) -> Tensor:
        h = F.relu(F.add(F.matmul(v, self.w1), self.b1))
        return F.add(F.matmul(h, self.w2), self.b2)

    def forward(self, rgb: Tensor, thm: Tensor):
        if rgb.shape != thm.shape:
            raise ValueError(f"modality feature shapes differ: rgb {rgb.shape} vs thm {thm.shape}")
        if rgb.shape[1] != self.channels:
            raise ValueError(f"fusion built for {self.channels} channels, got {rgb.shape[1]}")
        x = F.concat([rgb, thm], axis=1)
        n, c2 = x.shape[:2]
        ca = F.sigmoid(F.add(self._mlp(F.global_avg_pool(x)), self._mlp(F.global_max_pool(x))))
        x = F.mul(x, F.reshape(ca, (n, c2, 1, 1)))
        desc = F.concat([F.mean(x, axis=1, keepdims=True), F.max(x, axis=1, keepdims=True)], axis=1)
        sa = F.sigmoid(self.spatial(desc))
        x = F.mul(x, sa)
        return self.project(x), ca, sa


class ModalityFusion(Module):
    """One CBAM fusion module per pyramid level."""

    def __init__(self, levels: int, channels: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.levels = [CBAMFusion(channels, rng=rng) for _ in range(levels)]

    def forward(self, rgb_pyr: FeaturePyramid, thm_pyr: FeaturePyramid) -> FusedPyramid:
        if len(rgb_pyr) != len(thm_pyr) or len(rgb_pyr) != len(self.levels):
            raise ValueError(f"pyramid level counts differ: rgb {len(rgb_pyr)}, "
                             f"thm {len(thm_pyr)}, fusion {len(self.levels)}")
        out = FusedPyramid([])
        for mod, r, t in zip(self.levels, rgb_pyr.levels, thm_pyr.levels):
            if r.shape != t.shape:
                raise ValueError(f"modality pyramids differ at a level: {r.shape} vs {t.shape}")
            fused, ca, sa = mod(r, t)
            out.levels.append(fused)
            out.channel_gates.append(ca.data)
            out.spatial_gates.append(sa.data)
        return out
