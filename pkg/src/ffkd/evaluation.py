"""Detection metrics (COCO-style AP / mAP) and inference latency benchmarking."""

from __future__ import annotations

import dataclasses
import json
import platform
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import iou, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
INTERPOLATION = "101-point interpolated (COCO-style), per-class then per-threshold mean"

__all__ = ["iou", "PRCurve", "EvalReport", "average_precision", "map_over_thresholds",
           "LatencyReport", "bench_latency", "IOU_THRESHOLDS"]


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    num_gt: int = 0


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    if len(precision) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _match_class(dets: Sequence, gts: Sequence, class_id: int, iou_thresh: float):
    """Greedy matching of all detections of one class; returns (scores, tp, num_gt)."""
    rows = []  # (score, frame order, det order, is_tp)
    num_gt = 0
    for fi, (d, g) in enumerate(zip(dets, gts)):
        gmask = g.labels == class_id
        gboxes = g.boxes[gmask]
        num_gt += len(gboxes)
        dmask = np.nonzero(d.labels == class_id)[0]
        if len(dmask) == 0:
            continue
        order = dmask[np.lexsort((dmask, -d.scores[dmask]))]
        ious = iou_matrix(d.boxes[order], gboxes) if len(gboxes) else np.zeros((len(order), 0))
        taken = np.zeros(len(gboxes), dtype=bool)
        for r, di in enumerate(order):
            tp = False
            if len(gboxes):
                cand = np.where(taken, -1.0, ious[r])
                j = int(np.argmax(cand))
                if cand[j] >= iou_thresh:
                    taken[j] = True
                    tp = True
            rows.append((float(d.scores[di]), fi, int(di), tp))
    rows.sort(key=lambda t: (-t[0], t[1], t[2]))
    scores = np.array([r[0] for r in rows])
    tp = np.array([r[3] for r in rows], dtype=bool)
    return scores, tp, num_gt


def average_precision(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5,
                      class_id: Optional[int] = None) -> tuple[float, PRCurve]:
    """AP in [0, 1] for one class (or all labels pooled when ``class_id`` is None).

    ``dets`` and ``gts`` are per-frame sequences of DetectionSet and
    AnnotationSet.  Returns 0 when there are no ground truths; callers can
    detect that case via ``curve.num_gt == 0``.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection sets for {len(gts)} annotation sets")
    if class_id is None:
        dets = [dataclasses.replace(d, labels=np.ones_like(d.labels)) for d in dets]
        gts = [dataclasses.replace(g, labels=np.ones_like(g.labels)) for g in gts]
        class_id = 1
    scores, tp, num_gt = _match_class(dets, gts, class_id, iou_thresh)
    if num_gt == 0:
        return 0.0, PRCurve(np.zeros(0), np.zeros(0), scores, 0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return _interpolated_ap(precision, recall), PRCurve(precision, recall, scores, num_gt)


@dataclass
class EvalReport:
    ap: dict  # class id -> list of AP (percent) per IoU threshold
    map50: float
    map75: float
    map5095: float
    num_dets: int
    num_gts: int
    thresholds: tuple = IOU_THRESHOLDS
    classes_without_gt: list = field(default_factory=list)
    latency: Optional[float] = None
    latency_std: Optional[float] = None
    batch_size: Optional[int] = None
    interpolation: str = INTERPOLATION
    name: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "interpolation": self.interpolation,
                "thresholds": [float(t) for t in self.thresholds],
                "ap": {str(k): [float(x) for x in v] for k, v in self.ap.items()},
                "map50": self.map50, "map75": self.map75, "map50_95": self.map5095,
                "num_dets": self.num_dets, "num_gts": self.num_gts,
                "classes_without_gt": self.classes_without_gt,
                "latency_s_per_image": self.latency, "latency_std": self.latency_std,
                "batch_size": self.batch_size}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self, class_names: Optional[Sequence[str]] = None) -> str:
        head = f"# AP interpolation: {self.interpolation}"
        cols = f"{'model':<16}{'mAP@0.5:0.95':>14}{'mAP@0.5':>10}{'mAP@0.75':>10}"
        if self.latency is not None:
            cols += f"{'s/image':>10}"
        row = f"{self.name or '-':<16}{self.map5095:>14.1f}{self.map50:>10.1f}{self.map75:>10.1f}"
        if self.latency is not None:
            row += f"{self.latency:>10.4f}"
        lines = [head, cols, row, "", f"{'class':<16}{'AP@0.5:0.95':>14}{'AP@0.5':>10}{'AP@0.75':>10}"]
        for c, aps in sorted(self.ap.items()):
            name = class_names[c - 1] if class_names and 0 < c <= len(class_names) else str(c)
            lines.append(f"{name:<16}{np.mean(aps):>14.1f}{aps[0]:>10.1f}{aps[5]:>10.1f}")
        return "\n".join(lines)


def map_over_thresholds(dets: Sequence, gts: Sequence, num_classes: int = 3,
                        thresholds: Sequence[float] = IOU_THRESHOLDS, name: str = "") -> EvalReport:
    """Per-class AP at each threshold, averaged over classes with ground truth."""
    thresholds = tuple(float(t) for t in thresholds)
    ap = {}
    missing = []
    for c in range(1, num_classes + 1):
        row = []
        for t in thresholds:
            a, curve = average_precision(dets, gts, t, class_id=c)
            row.append(100.0 * a)
        if curve.num_gt == 0:
            missing.append(c)
        else:
            ap[c] = row
    if ap:
        per_t = np.mean(np.array(list(ap.values())), axis=0)
    else:
        per_t = np.zeros(len(thresholds))

    def at(t):
        hits = [i for i, x in enumerate(thresholds) if abs(x - t) < 1e-9]
        return float(per_t[hits[0]]) if hits else float("nan")

    return EvalReport(ap=ap, map50=at(0.5), map75=at(0.75), map5095=float(per_t.mean()),
                      num_dets=int(sum(len(d) for d in dets)),
                      num_gts=int(sum(len(g) for g in gts)), thresholds=thresholds,
                      classes_without_gt=missing, name=name)


@dataclass
class LatencyReport:
    mean: float  # seconds per image
    std: float
    batch_size: int
    batches: int
    warmup: int
    machine: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor()} "
                                                 f"python {platform.python_version()}")

    def to_dict(self) -> dict:
        return {"mean_s_per_image": self.mean, "std_s_per_image": self.std,
                "batch_size": self.batch_size, "batches": self.batches, "warmup": self.warmup,
                "machine": self.machine,
                "scope": "detect() end to end incl. decode and NMS, excluding disk I/O"}


def bench_latency(model, frames: Sequence, batch_size: int = 32, batches: int = 30,
                  warmup: int = 3, thresholds=None) -> LatencyReport:
    """Mean and std of per-image wall-clock time of ``detect`` over fixed batches."""
    from .detect import Thresholds, detect

    if batches < 1 or batch_size < 1 or not len(frames):
        raise ValueError("need at least one frame, one batch and batch_size >= 1")
    thresholds = thresholds or Thresholds()
    n = len(frames)

    def batch(k):
        return [frames[(k * batch_size + i) % n] for i in range(batch_size)]

    for k in range(warmup):
        detect(batch(k), model, thresholds)
    times = []
    for k in range(batches):
        b = batch(warmup + k)
        t0 = time.perf_counter()
        detect(b, model, thresholds)
        times.append((time.perf_counter() - t0) / batch_size)
    times = np.array(times)
    return LatencyReport(float(times.mean()), float(times.std(ddof=1) if batches > 1 else 0.0),
                         batch_size, batches, warmup)
