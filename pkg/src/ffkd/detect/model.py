"""Two-stream detector: backbone + BiFPN per modality, CBAM fusion, shared heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor, get_dtype
from ..backbone import Backbone, BackboneConfig, BiFPN, FeaturePyramid, StageSpec
from ..boxes import decode_boxes
from ..nn import Module
from .anchors import AnchorConfig, generate_anchors
from .fusion import FusedPyramid, ModalityFusion
from .heads import DetectionHead
from .nms import DetectionSet, nms_indices

MODALITIES = ("fusion", "rgb", "thermal")


@dataclass(frozen=True)
class ModelConfig:
    role: str = "teacher"
    modality: str = "fusion"
    num_classes: int = 3
    image_size: tuple = (128, 128)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bifpn_iterations: int = 2
    head_depth: int = 2
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if len(self.anchors.strides) != self.backbone.pyramid_levels:
            raise ValueError("anchor config must have one entry per pyramid level")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["stages"] = tuple(StageSpec(**s) for s in bb["stages"])
        an = d["anchors"]
        return cls(role=d["role"], modality=d["modality"], num_classes=d["num_classes"],
                   image_size=tuple(d["image_size"]), backbone=BackboneConfig(**bb),
                   bifpn_iterations=d["bifpn_iterations"], head_depth=d["head_depth"],
                   anchors=AnchorConfig(tuple(an["base_sizes"]), tuple(an["strides"]),
                                        tuple(an["ratios"])))

    def with_modality(self, modality: str) -> "ModelConfig":
        return dataclasses.replace(self, modality=modality)


def teacher_config(modality: str = "fusion") -> ModelConfig:
    return ModelConfig(role="teacher", modality=modality)


def student_config(modality: str = "fusion") -> ModelConfig:
    backbone = BackboneConfig(
        stem_channels=16,
        stages=(StageSpec(1, 16, 2, 1), StageSpec(1, 24, 2, 3), StageSpec(1, 40, 2, 3),
                StageSpec(1, 64, 2, 3)),
        width_multiplier=0.5,
        fpn_channels=24,
    )
    return ModelConfig(role="student", modality=modality, backbone=backbone,
                       bifpn_iterations=1, head_depth=1)


@dataclass
class DetectorOutput:
    z_cls: Tensor  # (N, A, C + 1)
    z_reg: Tensor  # (N, A, 4)
    fused: FusedPyramid


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bb = cfg.backbone
        levels, ch = bb.pyramid_levels, bb.fpn_channels
        self.rgb_backbone = Backbone(dataclasses.replace(bb, in_channels=3), rng)
        self.thm_backbone = Backbone(dataclasses.replace(bb, in_channels=1), rng)
        self.rgb_bifpn = BiFPN(levels, ch, cfg.bifpn_iterations, rng)
        self.thm_bifpn = BiFPN(levels, ch, cfg.bifpn_iterations, rng)
        self.fusion = ModalityFusion(levels, ch, rng)
        self.head = DetectionHead(ch, cfg.num_classes, cfg.anchors.per_cell, cfg.head_depth, rng)
        self.anchors = generate_anchors(cfg.anchors, cfg.image_size)

    def _zeros_like(self, pyr: FeaturePyramid, modality: str) -> FeaturePyramid:
        return FeaturePyramid([Tensor(np.zeros(l.shape, dtype=l.data.dtype)) for l in pyr.levels],
                              modality)

    def pyramids(self, rgb: Optional[Tensor], thm: Optional[Tensor]):
        """Refined per-modality pyramids; the absent modality becomes zeros."""
        mode = self.cfg.modality
        rgb_pyr = thm_pyr = None
        if mode in ("fusion", "rgb"):
            rgb_pyr = self.rgb_bifpn(self.rgb_backbone(rgb, "rgb"))
        if mode in ("fusion", "thermal"):
            thm_pyr = self.thm_bifpn(self.thm_backbone(thm, "thm"))
        if rgb_pyr is None:
            rgb_pyr = self._zeros_like(thm_pyr, "rgb")
        if thm_pyr is None:
            thm_pyr = self._zeros_like(rgb_pyr, "thm")
        return rgb_pyr, thm_pyr

    def forward(self, rgb: Optional[Tensor], thm: Optional[Tensor]) -> DetectorOutput:
        rgb_pyr, thm_pyr = self.pyramids(rgb, thm)
        fused = self.fusion(rgb_pyr, thm_pyr)
        z_cls, z_reg = self.head(fused.levels)
        return DetectorOutput(z_cls, z_reg, fused)


def to_inputs(frames: Sequence) -> tuple[Tensor, Tensor]:
    """Stack frames into normalised (N,3,H,W) RGB and (N,1,H,W) thermal tensors."""
    dt = get_dtype()
    rgb = np.stack([f.rgb for f in frames]).astype(dt).transpose(0, 3, 1, 2) / dt(255)
    thm = np.stack([f.thm for f in frames]).astype(dt)[:, None] / dt(255)
    return Tensor(rgb), Tensor(thm)


@dataclass(frozen=True)
class Thresholds:
    score: float = 0.3
    iou: float = 0.5
    max_dets: int = 100


def postprocess(z_cls: np.ndarray, z_reg: np.ndarray, anchors_cxcywh: np.ndarray,
                image_size: tuple, thresholds: Thresholds = Thresholds(),
                frame_ids: Optional[Sequence] = None) -> list[DetectionSet]:
    """Softmax, decode, confidence threshold and per-class NMS for a batch."""
    height, width = image_size
    z = z_cls.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    fg = probs[..., 1:]
    scores = fg.max(axis=-1)
    labels = fg.argmax(axis=-1) + 1
    out = []
    for i in range(z.shape[0]):
        cand = np.nonzero(scores[i] >= thresholds.score)[0]
        boxes = decode_boxes(z_reg[i, cand], anchors_cxcywh[cand], width, height)
        keep = nms_indices(boxes, scores[i, cand], labels[i, cand], thresholds.iou,
                           thresholds.score, tiebreak=cand, max_dets=thresholds.max_dets)
        out.append(DetectionSet(boxes[keep], scores[i, cand[keep]], labels[i, cand[keep]],
                                probs[i, cand[keep]], cand[keep],
                                None if frame_ids is None else frame_ids[i]))
    return out


def detect(frames, model: Detector, thresholds: Thresholds = Thresholds()) -> list[DetectionSet]:
    """End-to-end inference on one frame or a batch; no tape is recorded."""
    single = not isinstance(frames, (list, tuple))
    batch = [frames] if single else list(frames)
    model.eval()
    rgb, thm = to_inputs(batch)
    out = model(rgb, thm)
    dets = postprocess(out.z_cls.data, out.z_reg.data, model.anchors.boxes, model.cfg.image_size,
                       thresholds, [getattr(f, "frame_id", None) for f in batch])
    return dets[0] if single else dets
