from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, functional as F
from ..nn import Conv2d, DepthwiseConv2d, Module

OUTPUT_INIT_STD = 0.01
BACKGROUND_PRIOR = 0.99  # initial background probability of every anchor


class _TowerLayer(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.dw = DepthwiseConv2d(channels, 3, rng=rng)
        self.pw = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x):
        return F.hard_swish(self.pw(self.dw(x)))


class DetectionHead(Module):
    """Classification and box-offset heads shared across pyramid levels.

    Classification logits have ``num_classes + 1`` columns, column 0 being
    background.
    """

    def __init__(self, channels: int, num_classes: int, anchors_per_cell: int, depth: int = 1,
                 rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.num_outputs = num_classes + 1
        self.anchors_per_cell = anchors_per_cell
        self.tower = [_TowerLayer(channels, rng) for _ in range(depth)]
        self.cls_out = Conv2d(channels, anchors_per_cell * self.num_outputs, 1, rng=rng)
        self.reg_out = Conv2d(channels, anchors_per_cell * 4, 1, rng=rng)
        # Small output weights and a background prior keep the initial logits
        # near a confident "background" guess instead of large random values.
        for conv in (self.cls_out, self.reg_out):
            conv.weight.data[:] = rng.normal(0.0, OUTPUT_INIT_STD, conv.weight.shape)
        bias = self.cls_out.bias.data.reshape(anchors_per_cell, self.num_outputs)
        bias[:, 0] = np.log(BACKGROUND_PRIOR * num_classes / (1 - BACKGROUND_PRIOR))

    def _rows(self, t: Tensor, k: int) -> Tensor:
        # (N, A*k, H, W) -> (N, H*W*A, k), matching the (row, col, ratio) anchor order
        n, _, h, w = t.shape
        a = self.anchors_per_cell
        t = F.reshape(t, (n, a, k, h, w))
        t = F.transpose(t, (0, 3, 4, 1, 2))
        return F.reshape(t, (n, h * w * a, k))

    def forward(self, levels: list):
        cls_rows, reg_rows = [], []
        for x in levels:
            for layer in self.tower:
                x = layer(x)
            cls_rows.append(self._rows(self.cls_out(x), self.num_outputs))
            reg_rows.append(self._rows(self.reg_out(x), 4))
        z_cls = cls_rows[0] if len(cls_rows) == 1 else F.concat(cls_rows, axis=1)
        z_reg = reg_rows[0] if len(reg_rows) == 1 else F.concat(reg_rows, axis=1)
        return z_cls, z_reg
