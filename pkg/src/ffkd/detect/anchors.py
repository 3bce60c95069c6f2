from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AnchorConfig:
    base_sizes: tuple = (20.0, 28.0, 36.0)
    strides: tuple = (8, 16, 32)
    ratios: tuple = (0.5, 1.0, 2.0)  # height / width

    def __post_init__(self):
        if len(self.base_sizes) != len(self.strides):
            raise ValueError("one base size per pyramid level is required")

    @property
    def per_cell(self) -> int:
        return len(self.ratios)

    def to_dict(self) -> dict:
        return {"base_sizes": list(self.base_sizes), "strides": list(self.strides),
                "ratios": list(self.ratios)}


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # (N, 4) cx, cy, w, h
    level_sizes: tuple  # anchors per level

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def xywh(self) -> np.ndarray:
        b = self.boxes
        return np.concatenate([b[:, :2] - b[:, 2:] / 2, b[:, 2:]], axis=1)


def generate_anchors(cfg: AnchorConfig, image_size: tuple) -> AnchorSet:
    """Anchors ordered (level, row, col, ratio), centred on grid cells."""
    height, width = image_size
    out = []
    sizes = []
    for base, stride in zip(cfg.base_sizes, cfg.strides):
        if height % stride or width % stride:
            raise ValueError(f"stride {stride} does not divide image size {height}x{width}")
        rows, cols = height // stride, width // stride
        ws = np.array([base / np.sqrt(r) for r in cfg.ratios])
        hs = np.array([base * np.sqrt(r) for r in cfg.ratios])
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride,
                             indexing="ij")
        grid = np.empty((rows, cols, len(cfg.ratios), 4))
        grid[..., 0] = cx[..., None]
        grid[..., 1] = cy[..., None]
        grid[..., 2] = ws
        grid[..., 3] = hs
        out.append(grid.reshape(-1, 4))
        sizes.append(rows * cols * len(cfg.ratios))
    return AnchorSet(np.concatenate(out, axis=0), tuple(sizes))
