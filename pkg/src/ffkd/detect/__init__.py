from .anchors import AnchorConfig, AnchorSet, generate_anchors
from .fusion import CBAMFusion, FusedPyramid, ModalityFusion
from .heads import DetectionHead
from .model import (
    Detector,
    DetectorOutput,
    ModelConfig,
    Thresholds,
    detect,
    postprocess,
    student_config,
    teacher_config,
    to_inputs,
)
from .nms import DetectionSet, nms, nms_indices

__all__ = [
    "AnchorConfig", "AnchorSet", "CBAMFusion", "DetectionHead", "DetectionSet", "Detector",
    "DetectorOutput", "FusedPyramid", "ModalityFusion", "ModelConfig", "Thresholds", "detect",
    "generate_anchors", "nms", "nms_indices", "postprocess", "student_config", "teacher_config",
    "to_inputs",
]
