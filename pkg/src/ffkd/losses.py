"""Supervised, distillation and composite training losses."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, functional as F
from .boxes import decode_tensor, encode, iou_matrix
from .detect.anchors import AnchorSet
from .nn import Conv2d, Module

log = logging.getLogger(__name__)

#: incremented whenever a distillation term sees no matched anchors
warning_counts: Counter = Counter()

IGNORE, NEGATIVE = -1, 0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # detection (ground truth)
    beta: float = 0.5  # feature distillation
    gamma_kd: float = 0.5  # knowledge distillation
    lambda_cls: float = 0.5
    lambda_reg: float = 0.5
    gamma_gt: float = 0.5
    tau: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative, got {getattr(self, f.name)}")
        for name in ("lambda_cls", "lambda_reg", "gamma_gt"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.tau < 1:
            raise ValueError(f"distillation temperature must be >= 1, got {self.tau}")


@dataclass
class LossBreakdown:
    class_distill: float = 0.0
    box_distill: float = 0.0
    kd_total: float = 0.0
    class_ce: float = 0.0
    box_reg: float = 0.0
    gt_total: float = 0.0
    feature_distill: float = 0.0
    final: float = 0.0
    num_pos: int = 0
    num_neg: int = 0
    num_matched: int = 0
    total: Optional[Tensor] = field(default=None, repr=False, compare=False)

    TERMS = ("class_distill", "box_distill", "kd_total", "class_ce", "box_reg", "gt_total",
             "feature_distill", "final")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.TERMS + ("num_pos", "num_neg", "num_matched")}


# ------------------------------------------------------------ class / box KD

def softened_probs(logits, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return F.softmax(logits, axis=-1, temperature=tau)


def _select(t, mask):
    """Rows of a (B, A, K) tensor where ``mask`` (B, A) is set -> (M, K)."""
    if mask is None:
        return t if t.ndim == 2 else F.reshape(t, (-1, t.shape[-1]))
    bi, ai = np.nonzero(np.asarray(mask))
    return F.gather_rows(t, bi, ai)


def _detached(x) -> Tensor:
    return Tensor._wrap(x.data) if isinstance(x, Tensor) else Tensor(x)


def class_distill_loss(teacher_logits, student_logits: Tensor, matched=None,
                       tau: float = 2.0) -> Tensor:
    """tau^2 * mean over matched anchors of KL(p_T || p_S) at temperature tau.

    ``matched`` is a (B, A) boolean mask, or None for all rows of (M, K)
    logits.  The teacher side carries no gradient.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    zt = _select(_detached(teacher_logits), matched)
    zs = _select(student_logits, matched)
    if zs.shape[0] == 0:
        warning_counts["class_distill_empty"] += 1
        return Tensor(0.0)
    log_pt = F.log_softmax(zt, axis=-1, temperature=tau).data
    pt = np.exp(log_pt)
    log_ps = F.log_softmax(zs, axis=-1, temperature=tau)
    kl = F.sum(F.mul(pt, F.sub(log_pt, log_ps)))
    return F.mul(kl, tau * tau / zs.shape[0])


def smooth_l1(x) -> Tensor:
    """Elementwise smooth-L1, summed."""
    return F.sum(F.smooth_l1(x))


def box_distill_loss(teacher_boxes, student_boxes: Tensor, matched=None) -> Tensor:
    """Sum of smooth-L1 over box coordinates, averaged over matched anchors."""
    bt = _select(_detached(teacher_boxes), matched)
    bs = _select(student_boxes, matched)
    if bs.shape[0] == 0:
        warning_counts["box_distill_empty"] += 1
        return Tensor(0.0)
    return F.mul(smooth_l1(F.sub(bs, bt)), 1.0 / bs.shape[0])


def kd_loss(class_term, box_term, lambda_cls: float, lambda_reg: float) -> Tensor:
    return F.add(F.mul(class_term, lambda_cls), F.mul(box_term, lambda_reg))


def anchor_relative_boxes(z_reg: Tensor, anchors: AnchorSet) -> Tensor:
    """Decoded (cx, cy, w, h) boxes divided by their anchor's (w, h, w, h)."""
    a = anchors.boxes.astype(z_reg.data.dtype)
    boxes = decode_tensor(z_reg, a)
    scale = np.concatenate([a[:, 2:], a[:, 2:]], axis=1)
    return F.div(boxes, scale)


def distill_mask(teacher_logits, threshold: float = 0.25) -> np.ndarray:
    """Anchors whose teacher max foreground probability reaches ``threshold``."""
    z = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p[..., 1:].max(axis=-1) >= threshold


# -------------------------------------------------------- anchor assignment

@dataclass
class AnchorAssignment:
    labels: np.ndarray  # (A,) -1 ignore, 0 negative, c >= 1 positive class id
    matched_gt: np.ndarray  # (A,) gt index or -1
    targets: np.ndarray  # (A, 4) encoded regression targets, zero where not positive

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels > 0)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.labels == NEGATIVE)[0]


def assign_anchors(gt_boxes: np.ndarray, gt_labels: np.ndarray, anchors: AnchorSet,
                   pos_iou: float = 0.5, neg_iou: float = 0.4) -> AnchorAssignment:
    """Max-IoU matching with a forced best anchor for every ground truth."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt_boxes) == 0:
        return AnchorAssignment(labels, matched, targets)
    ious = iou_matrix(anchors.xywh, gt_boxes)  # (A, K)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    pos = best_iou >= pos_iou
    matched[pos] = best_gt[pos]
    # forced matches, strongest ground truth first; a gt whose best anchor is
    # taken falls back to its next-best free anchor
    forced = np.zeros(n, dtype=bool)
    order = sorted(range(len(gt_boxes)), key=lambda k: (-ious[:, k].max(), k))
    for k in order:
        col = ious[:, k]
        for a in np.lexsort((np.arange(n), -col)):
            if col[a] <= 0:
                break
            if not forced[a]:
                forced[a] = True
                matched[a] = k
                break
    pos_idx = np.nonzero(matched >= 0)[0]
    labels[pos_idx] = gt_labels[matched[pos_idx]]
    targets[pos_idx] = encode(gt_boxes[matched[pos_idx]], anchors.boxes[pos_idx])
    return AnchorAssignment(labels, matched, targets)


# ------------------------------------------------------------ ground truth

def ground_truth_loss(z_cls: Tensor, z_reg: Tensor, assignments: Sequence[AnchorAssignment],
                      gamma_gt: float = 0.5, neg_ratio: int = 3, min_neg: int = 16):
    """gamma * CE + (1 - gamma) * smooth-L1 over encoded box residuals.

    CE covers positive anchors against their gt class and the hardest
    background anchors (``neg_ratio`` per positive, at least ``min_neg`` per
    image) against background.  Both terms are normalised by the positive
    count (or by the negative count when the batch has no positives).
    Returns (loss, class_ce, box_reg, num_pos, num_neg).
    """
    logp = F.log_softmax(z_cls, axis=-1)
    lp = logp.data
    pos_b, pos_a, pos_c = [], [], []
    neg_b, neg_a = [], []
    tgt = []
    for b, asg in enumerate(assignments):
        p = asg.positives
        pos_b.append(np.full(len(p), b))
        pos_a.append(p)
        pos_c.append(asg.labels[p])
        tgt.append(asg.targets[p])
        negs = asg.negatives
        k = min(len(negs), max(neg_ratio * len(p), min_neg))
        if k:
            bg_loss = -lp[b, negs, 0]
            pick = negs[np.lexsort((negs, -bg_loss))[:k]]
            neg_b.append(np.full(k, b))
            neg_a.append(pick)
    pos_b = np.concatenate(pos_b).astype(np.int64)
    pos_a = np.concatenate(pos_a).astype(np.int64)
    pos_c = np.concatenate(pos_c).astype(np.int64)
    neg_b = np.concatenate(neg_b).astype(np.int64) if neg_b else np.zeros(0, np.int64)
    neg_a = np.concatenate(neg_a).astype(np.int64) if neg_a else np.zeros(0, np.int64)
    n_pos, n_neg = len(pos_a), len(neg_a)
    norm = 1.0 / max(n_pos if n_pos else n_neg, 1)

    ce_terms = []
    if n_pos:
        ce_terms.append(F.sum(F.pick(F.gather_rows(logp, pos_b, pos_a), pos_c)))
    if n_neg:
        ce_terms.append(F.sum(F.pick(F.gather_rows(logp, neg_b, neg_a), np.zeros(n_neg, np.int64))))
    if ce_terms:
        ce = F.mul(ce_terms[0] if len(ce_terms) == 1 else F.add(*ce_terms), -norm)
    else:
        ce = Tensor(0.0)
    if n_pos:
        targets = np.concatenate(tgt).astype(z_reg.data.dtype)
        box = F.mul(smooth_l1(F.sub(F.gather_rows(z_reg, pos_b, pos_a), targets)), 1.0 / n_pos)
    else:
        box = Tensor(0.0)
    total = F.add(F.mul(ce, gamma_gt), F.mul(box, 1.0 - gamma_gt))
    return total, ce, box, n_pos, n_neg


# ------------------------------------------------------- feature distillation

class FeatureAdapters(Module):
    """Per-level 1x1 convs lifting student channels to teacher channels."""

    def __init__(self, levels: int, student_channels: int, teacher_channels: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.convs = [Conv2d(student_channels, teacher_channels, 1, rng=rng) for _ in range(levels)]


def feature_distill_loss(student_levels: Sequence[Tensor], teacher_levels: Sequence,
                         adapters: Optional[FeatureAdapters] = None) -> Tensor:
    """MSE between adapted student maps and (detached) teacher maps, averaged over levels."""
    if len(student_levels) != len(teacher_levels):
        raise ValueError(f"level count mismatch: student {len(student_levels)}, "
                         f"teacher {len(teacher_levels)}")
    if adapters is not None and len(adapters.convs) != len(student_levels):
        raise ValueError(f"{len(adapters.convs)} adapters for {len(student_levels)} levels")
    terms = []
    for i, (s, t) in enumerate(zip(student_levels, teacher_levels)):
        s_ad = adapters.convs[i](s) if adapters is not None else s
        t = _detached(t)
        if s_ad.shape != t.shape:
            raise ValueError(f"level {i}: adapted student {s_ad.shape} vs teacher {t.shape}")
        terms.append(F.mean(F.square(F.sub(s_ad, t))))
    total = terms[0]
    for t in terms[1:]:
        total = F.add(total, t)
    return F.mul(total, 1.0 / len(terms))


# ---------------------------------------------------------------- composite

def final_loss(gt_total, feature_distill, kd_total, weights: LossWeights,
               parts: Optional[dict] = None) -> LossBreakdown:
    """alpha * L_det + beta * L_FD + gamma_kd * L_KD with a scalar breakdown."""
    for name in ("alpha", "beta", "gamma_kd"):
        if getattr(weights, name) < 0:
            raise ValueError(f"{name} must be nonnegative")
    total = F.add(F.add(F.mul(gt_total, weights.alpha), F.mul(feature_distill, weights.beta)),
                  F.mul(kd_total, weights.gamma_kd))

    def val(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    br = LossBreakdown(gt_total=val(gt_total), feature_distill=val(feature_distill),
                       kd_total=val(kd_total), final=val(total), total=total)
    for k, v in (parts or {}).items():
        setattr(br, k, val(v) if k in LossBreakdown.TERMS else int(v))
    return br
