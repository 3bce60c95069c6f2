"""Supervised and distillation training loops, evaluation and run artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from .autodiff import OptimizerState, Tape, Tensor, adam_step, cosine_lr
from .config import ConfigError, TrainConfig
from .data import load_manifest
from .detect import Detector, ModelConfig, Thresholds, postprocess, student_config, teacher_config, to_inputs
from .evaluation import map_over_thresholds
from .losses import (
    FeatureAdapters,
    LossBreakdown,
    LossWeights,
    anchor_relative_boxes,
    assign_anchors,
    box_distill_loss,
    class_distill_loss,
    distill_mask,
    feature_distill_loss,
    final_loss,
    ground_truth_loss,
    kd_loss,
)

log = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "epoch", "lr", "class_distill", "box_distill", "kd_total", "class_ce",
                "box_reg", "gt_total", "feature_distill", "final")
EPOCH_COLUMNS = ("epoch", "split", "class_distill", "box_distill", "class_ce", "box_reg",
                 "feature_distill", "final")


def model_config_for(cfg: TrainConfig) -> ModelConfig:
    make = teacher_config if cfg.role == "teacher" else student_config
    return make(cfg.modality)


def compute_losses(student, teacher_out, assignments, weights: LossWeights,
                   anchors, adapters: Optional[FeatureAdapters]) -> LossBreakdown:
    """Every loss term for one batch; ``teacher_out`` is None outside distillation."""
    gt_total, ce, box, n_pos, n_neg = ground_truth_loss(student.z_cls, student.z_reg, assignments,
                                                        weights.gamma_gt)
    parts = {"class_ce": ce, "box_reg": box, "num_pos": n_pos, "num_neg": n_neg}
    if teacher_out is None:
        zero = Tensor(0.0)
        return final_loss(gt_total, zero, zero, weights, parts)
    mask = distill_mask(teacher_out.z_cls)
    cd = class_distill_loss(teacher_out.z_cls, student.z_cls, mask, weights.tau)
    bd = box_distill_loss(anchor_relative_boxes(teacher_out.z_reg, anchors),
                          anchor_relative_boxes(student.z_reg, anchors), mask)
    kd = kd_loss(cd, bd, weights.lambda_cls, weights.lambda_reg)
    fd = feature_distill_loss(student.fused.levels, teacher_out.fused.levels, adapters)
    parts.update(class_distill=cd, box_distill=bd, num_matched=int(mask.sum()))
    return final_loss(gt_total, fd, kd, weights, parts)


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def evaluate(model: Detector, samples: Sequence, batch_size: int = 32,
             thresholds: Thresholds = Thresholds(), teacher: Optional[Detector] = None,
             adapters=None, weights: Optional[LossWeights] = None, assignments=None,
             name: str = ""):
    """Detections, EvalReport and (optionally) mean loss breakdown on ``samples``."""
    model.eval()
    frames = [f for f, _ in samples]
    anns = [a for _, a in samples]
    dets, sums, batches = [], {}, 0
    for sl in _batches(len(frames), batch_size):
        rgb, thm = to_inputs(frames[sl])
        out = model(rgb, thm)
        dets += postprocess(out.z_cls.data, out.z_reg.data, model.anchors.boxes,
                            model.cfg.image_size, thresholds, [f.frame_id for f in frames[sl]])
        if weights is not None:
            t_out = teacher(rgb, thm) if teacher is not None else None
            br = compute_losses(out, t_out, assignments[sl], weights, model.anchors, adapters)
            for k in LossBreakdown.TERMS:
                sums[k] = sums.get(k, 0.0) + getattr(br, k)
            batches += 1
    report = map_over_thresholds(dets, anns, model.cfg.num_classes, name=name)
    mean = {k: v / batches for k, v in sums.items()} if batches else None
    return dets, report, mean


@dataclass
class TrainResult:
    model: Detector
    best_epoch: int
    best_map50: float
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    seconds: float = 0.0
    adapters: Optional[FeatureAdapters] = None


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def load_teacher(cfg: TrainConfig, student_cfg: ModelConfig, teacher: Optional[Detector]) -> Detector:
    if teacher is None:
        teacher = ckpt_io.build_model(ckpt_io.load(cfg.teacher_checkpoint))
    if (teacher.cfg.anchors != student_cfg.anchors
            or tuple(teacher.cfg.image_size) != tuple(student_cfg.image_size)):
        raise ConfigError("teacher and student anchor grids differ; distillation pairs anchors "
                          "one to one and needs identical anchor configs")
    teacher.freeze()
    teacher.eval()
    return teacher


def train(cfg: TrainConfig, train_samples: Optional[Sequence] = None,
          val_samples: Optional[Sequence] = None, teacher: Optional[Detector] = None,
          model_config: Optional[ModelConfig] = None, out_dir=None,
          verbose: bool = False) -> TrainResult:
    """Train one model per ``cfg``; writes logs and the best-val checkpoint to ``out_dir``."""
    with threadpool_limits(limits=1):
        return _train(cfg, train_samples, val_samples, teacher, model_config, out_dir, verbose)


def _train(cfg, train_samples, val_samples, teacher, model_config, out_dir, verbose):
    t_start = time.perf_counter()
    if train_samples is None:
        if not cfg.train_manifest:
            raise ConfigError("no training data: set train_manifest")
        train_samples = load_manifest(cfg.train_manifest)
    if val_samples is None and cfg.val_manifest:
        val_samples = load_manifest(cfg.val_manifest)
    if cfg.max_train_frames:
        train_samples = list(train_samples)[:cfg.max_train_frames]
    if val_samples is not None and cfg.max_val_frames:
        val_samples = list(val_samples)[:cfg.max_val_frames]
    if not len(train_samples):
        raise ConfigError("training set is empty")

    mcfg = model_config or model_config_for(cfg)
    model = Detector(mcfg, seed=cfg.seed)
    adapters = None
    if cfg.mode == "distill":
        teacher = load_teacher(cfg, mcfg, teacher)
        adapters = FeatureAdapters(mcfg.backbone.pyramid_levels, mcfg.backbone.fpn_channels,
                                   teacher.cfg.backbone.fpn_channels,
                                   rng=np.random.default_rng([cfg.seed, 1]))
    else:
        teacher = None
    params = model.parameters() + (adapters.parameters() if adapters is not None else [])

    frames = [f for f, _ in train_samples]
    assignments = [assign_anchors(a.boxes, a.labels, model.anchors) for _, a in train_samples]
    val_asg = ([assign_anchors(a.boxes, a.labels, model.anchors) for _, a in val_samples]
               if val_samples is not None else None)
    n = len(frames)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    order_rng = np.random.default_rng([cfg.seed, 2])
    opt = OptimizerState(lr=cfg.lr)

    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    result = TrainResult(model, 0, -1.0, adapters=adapters)
    best_state = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        model.train()
        sums = {k: 0.0 for k in LossBreakdown.TERMS}
        for sl in _batches(n, cfg.batch_size):
            idx = perm[sl]
            opt.lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)
            rgb, thm = to_inputs([frames[i] for i in idx])
            model.zero_grad()
            if adapters is not None:
                adapters.zero_grad()
            with Tape() as tape:
                s_out = model(rgb, thm)
                t_out = teacher(rgb, thm) if teacher is not None else None
                br = compute_losses(s_out, t_out, [assignments[i] for i in idx], cfg.weights,
                                    model.anchors, adapters)
                tape.backward(br.total, params)
            adam_step(params, opt)
            step += 1
            row = {"step": step, "epoch": epoch, "lr": opt.lr, **{k: getattr(br, k) for k in
                                                                  LossBreakdown.TERMS}}
            result.steps.append(row)
            for k in LossBreakdown.TERMS:
                sums[k] += getattr(br, k)
        result.epochs.append({"epoch": epoch, "split": "train",
                              **{k: v / per_epoch for k, v in sums.items()}})
        if val_samples is not None:
            _, report, vloss = evaluate(model, val_samples, teacher=teacher, adapters=adapters,
                                        weights=cfg.weights, assignments=val_asg)
            result.epochs.append({"epoch": epoch, "split": "val", **vloss})
            score = report.map50
            result.val_metrics.append({"epoch": epoch, "map50": report.map50,
                                       "map50_95": report.map5095})
        else:
            score = float(epoch)  # without validation the last epoch is kept
        if score > result.best_map50:
            result.best_map50, result.best_epoch = score, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            meta = {"epoch": epoch, "seed": cfg.seed, "mode": cfg.mode, "role": cfg.role,
                    "val_map50": score if val_samples is not None else None,
                    "final_loss": result.epochs[-1]["final"]}
            result.checkpoint_path = out / "best.ckpt"
            ckpt_io.save(result.checkpoint_path, ckpt_io.from_model(model, meta))
        if verbose:
            msg = f"epoch {epoch}: train final {result.epochs[-1 if val_samples is None else -2]['final']:.4f}"
            if val_samples is not None:
                msg += f", val final {vloss['final']:.4f}, val mAP@0.5 {score:.2f}"
            print(msg, flush=True)

    model.load_state_dict(best_state)
    _write_csv(out / "steps.csv", STEP_COLUMNS, result.steps)
    _write_csv(out / "epochs.csv", EPOCH_COLUMNS, result.epochs)
    if result.val_metrics:
        _write_csv(out / "val_metrics.csv", ("epoch", "map50", "map50_95"), result.val_metrics)
    result.seconds = time.perf_counter() - t_start
    return result
