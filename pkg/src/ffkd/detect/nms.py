from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..boxes import iou_matrix


@dataclass
class DetectionSet:
    """Detections for one frame; boxes are xywh pixels, probs include background at column 0."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray  # class ids 1..C
    probs: np.ndarray
    anchor_idx: np.ndarray = field(default=None)
    frame_id: Optional[str] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.scores)
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or len(probs) != n:
            probs = probs.reshape(n, -1) if probs.size else np.zeros((n, 0))
        self.probs = probs
        if self.anchor_idx is None:
            self.anchor_idx = np.arange(n)
        self.anchor_idx = np.asarray(self.anchor_idx, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.scores)

    def subset(self, idx) -> "DetectionSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DetectionSet(self.boxes[idx], self.scores[idx], self.labels[idx],
                            self.probs[idx], self.anchor_idx[idx], self.frame_id)

    def to_json(self) -> str:
        dets = [{"bbox": [float(v) for v in b], "class_id": int(c), "score": float(s),
                 "probs": [float(p) for p in pr]}
                for b, c, s, pr in zip(self.boxes, self.labels, self.scores, self.probs)]
        return json.dumps({"frame_id": self.frame_id, "detections": dets})

    @classmethod
    def from_json(cls, line: str) -> "DetectionSet":
        obj = json.loads(line)
        dets = obj["detections"]
        return cls(boxes=[d["bbox"] for d in dets], scores=[d["score"] for d in dets],
                   labels=[d["class_id"] for d in dets],
                   probs=[d.get("probs", []) for d in dets] if dets else np.zeros((0, 0)),
                   frame_id=obj.get("frame_id"))


def _order(scores: np.ndarray, tiebreak: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # descending score, lower anchor index first on ties
    return idx[np.lexsort((tiebreak[idx], -scores[idx]))]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_thresh: float,
                score_thresh: float = 0.0, tiebreak: Optional[np.ndarray] = None,
                max_dets: Optional[int] = None) -> np.ndarray:
    """Greedy per-class suppression; returns kept indices in emission order."""
    if not 0 < iou_thresh < 1:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if tiebreak is None:
        tiebreak = np.arange(len(scores))
    cand = np.nonzero(scores >= score_thresh)[0]
    keep = []
    for c in np.unique(labels[cand]):
        oc = _order(scores, tiebreak, cand[labels[cand] == c])
        ious = iou_matrix(boxes[oc], boxes[oc])
        alive = np.ones(len(oc), dtype=bool)
        for i in range(len(oc)):
            if not alive[i]:
                continue
            keep.append(oc[i])
            alive &= ~(ious[i] > iou_thresh)
    keep = _order(scores, tiebreak, np.asarray(keep, dtype=np.int64))
    if max_dets is not None:
        keep = keep[:max_dets]
    return keep


def nms(dets: DetectionSet, iou_thresh: float = 0.5, score_thresh: float = 0.3,
        max_dets: Optional[int] = 100) -> DetectionSet:
    keep = nms_indices(dets.boxes, dets.scores, dets.labels, iou_thresh, score_thresh,
                       dets.anchor_idx, max_dets)
    return dets.subset(keep)
