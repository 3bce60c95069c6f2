"""Box conversions, anchor-relative encoding and IoU.

Boxes are ``[x, y, w, h]`` with (x, y) the top-left corner unless a function
says ``cxcywh``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, functional as F

LOG_SCALE_CLAMP = 4.0


def xywh_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] + b[..., 2:] / 2, b[..., 2:]], axis=-1)


def cxcywh_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., 2:]], axis=-1)


def iou(a, b) -> float:
    """IoU of two xywh boxes; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (M, 4) and (K, 4) xywh boxes -> (M, K)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode(gt_xywh: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) of xywh ground truths vs anchors."""
    g = xywh_to_cxcywh(gt_xywh)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    tx = (g[..., 0] - a[..., 0]) / a[..., 2]
    ty = (g[..., 1] - a[..., 1]) / a[..., 3]
    tw = np.log(g[..., 2] / a[..., 2])
    th = np.log(g[..., 3] / a[..., 3])
    return np.stack([tx, ty, tw, th], axis=-1)


def decode(offsets: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    """Offsets -> cxcywh boxes (no clipping); log-scales clamped to +-4."""
    t = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    tw = np.clip(t[..., 2], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    th = np.clip(t[..., 3], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    return np.stack([a[..., 0] + t[..., 0] * a[..., 2], a[..., 1] + t[..., 1] * a[..., 3],
                     a[..., 2] * np.exp(tw), a[..., 3] * np.exp(th)], axis=-1)


def clip_boxes(xywh: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip xywh boxes to the image so x in [0, W], y in [0, H], w <= W, h <= H."""
    b = np.asarray(xywh, dtype=np.float64)
    x1 = np.clip(b[..., 0], 0, width)
    y1 = np.clip(b[..., 1], 0, height)
    x2 = np.clip(b[..., 0] + b[..., 2], 0, width)
    y2 = np.clip(b[..., 1] + b[..., 3], 0, height)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1)


def decode_boxes(z_reg: np.ndarray, anchors_cxcywh: np.ndarray, width: float,
                 height: float) -> np.ndarray:
    """Offsets -> clipped xywh boxes in pixels."""
    return clip_boxes(cxcywh_to_xywh(decode(z_reg, anchors_cxcywh)), width, height)


def decode_tensor(z_reg: Tensor, anchors_cxcywh: np.ndarray) -> Tensor:
    """Differentiable decode to cxcywh; anchors broadcast over leading dims."""
    a = np.asarray(anchors_cxcywh, dtype=z_reg.data.dtype)
    wh = a[..., 2:]
    t_xy = F.take(z_reg, [0, 1], axis=-1)
    t_wh = F.clamp(F.take(z_reg, [2, 3], axis=-1), -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    xy = F.add(F.mul(t_xy, wh), a[..., :2])
    return F.concat([xy, F.mul(F.exp(t_wh), wh)], axis=-1)
