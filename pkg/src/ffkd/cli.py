"""Command line entry point: ``ffkd gen-data|train|eval|bench|stats``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _kv_defaults(args, keys):
    """Fill unset options from a key-value ``--config`` file."""
    from .config import parse_kv_text

    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    kv = parse_kv_text(path.read_text(), str(path))
    unknown = set(kv) - set(keys)
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    for k, conv in keys.items():
        if k in kv and getattr(args, k, None) is None:
            setattr(args, k, conv(kv[k]))


def _require(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def cmd_gen_data(args) -> int:
    from .config import scene_spec_from_text
    from .data import SceneSpec, make_splits
    from .stats import class_distribution

    if args.config:
        spec = scene_spec_from_text(_require(args.config, "spec file").read_text(), args.config)
    else:
        spec = SceneSpec()
    counts = dict(zip(("train", "val", "test"), (int(c) for c in args.counts.split(","))))
    if len(counts) != 3 or min(counts.values()) < 1:
        raise UsageError("--counts needs three positive integers: train,val,test")
    out = Path(args.out or "data")
    seed = spec.seed if args.seed is None else args.seed
    paths = make_splits(spec, counts, out, seed)
    from .data import load_annotation

    print(f"spec_hash {spec.hash()}  seed {seed}")
    for split, p in paths.items():
        man = json.loads(p.read_text())
        anns = [load_annotation(out / it["ann"]) for it in man["items"]]
        dist = class_distribution(anns)
        freqs = " ".join(f"{f:.3f}" for f in dist.freqs)
        print(f"{split:<6} frames {len(anns):>6}  targets {int(dist.counts.sum()):>6}  "
              f"pi_hat {freqs}  -> {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import TrainConfig
    from .train import train

    cfg = TrainConfig.from_file(_require(args.config, "training config"))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    _require(cfg.train_manifest, "train_manifest")
    if cfg.val_manifest:
        _require(cfg.val_manifest, "val_manifest")
    if cfg.mode == "distill":
        _require(cfg.teacher_checkpoint, "teacher_checkpoint")
    res = train(cfg, verbose=True)
    print(f"best epoch {res.best_epoch}  val mAP@0.5 {res.best_map50:.2f}  "
          f"checkpoint {res.checkpoint_path}  ({res.seconds:.1f} s)")
    return EXIT_OK


def _load_samples(manifest):
    from .data import load_manifest

    try:
        samples = load_manifest(_require(manifest, "manifest"))
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot load {manifest}: {e}") from e
    if not samples:
        raise UsageError(f"manifest {manifest} lists no frames")
    return samples


def cmd_eval(args) -> int:
    from . import checkpoint as ckpt_io
    from .detect import DetectionSet, Thresholds
    from .evaluation import map_over_thresholds
    from .train import evaluate

    _kv_defaults(args, {"checkpoint": str, "manifest": str, "detections": str, "score": float,
                        "iou": float, "batch_size": int})
    samples = _load_samples(args.manifest)
    anns = [a for _, a in samples]
    thr = Thresholds(score=args.score if args.score is not None else 0.3,
                     iou=args.iou if args.iou is not None else 0.5)
    if args.detections:
        lines = _require(args.detections, "detections file").read_text().splitlines()
        by_id = {}
        for ln in lines:
            if ln.strip():
                d = DetectionSet.from_json(ln)
                by_id[d.frame_id] = d
        dets = [by_id.get(a.frame_id, DetectionSet(np.zeros((0, 4)), [], [], np.zeros((0, 0)),
                                                    frame_id=a.frame_id)) for a in anns]
        report = map_over_thresholds(dets, anns, name=Path(args.detections).stem)
    else:
        model = ckpt_io.build_model(ckpt_io.load(_require(args.checkpoint, "checkpoint")))
        dets, report, _ = evaluate(model, samples, batch_size=args.batch_size or 32,
                                   thresholds=thr, name=Path(args.checkpoint).stem)
    from .data import CLASS_NAMES

    print(report.to_table(CLASS_NAMES))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_table(CLASS_NAMES) + "\n")
        with open(out / "detections.jsonl", "w") as f:
            for d in dets:
                f.write(d.to_json() + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    from threadpoolctl import threadpool_limits

    from . import checkpoint as ckpt_io
    from .evaluation import bench_latency

    _kv_defaults(args, {"manifest": str, "batch_size": int, "batches": int, "warmup": int})
    if not args.checkpoint:
        raise UsageError("missing --checkpoint")
    models = [(p, ckpt_io.build_model(ckpt_io.load(_require(p, "checkpoint"))))
              for p in args.checkpoint]
    frames = [f for f, _ in _load_samples(args.manifest)]
    reports = {}
    with threadpool_limits(limits=1):
        for path, model in models:
            rep = bench_latency(model, frames, args.batch_size or 32, args.batches or 30,
                                3 if args.warmup is None else args.warmup)
            reports[path] = rep.to_dict() | {"role": model.cfg.role,
                                             "params": model.num_parameters()}
            print(f"{path}: {rep.mean:.5f} +- {rep.std:.5f} s/image "
                  f"(batch {rep.batch_size}, {rep.batches} batches, role {model.cfg.role})")
    summary = {"runs": reports, "machine": next(iter(reports.values()))["machine"]}
    roles = {r["role"]: r["mean_s_per_image"] for r in reports.values()}
    if "teacher" in roles and "student" in roles:
        summary["student_teacher_ratio"] = roles["student"] / roles["teacher"]
        print(f"student/teacher latency ratio {summary['student_teacher_ratio']:.3f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.json").write_text(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .data import CLASS_NAMES
    from .stats import class_distribution, estimate_prior, write_histogram_csv, write_kde_csvs

    _kv_defaults(args, {"manifest": str})
    samples = _load_samples(args.manifest)
    anns = [a for _, a in samples]
    out = Path(args.out or "stats")
    out.mkdir(parents=True, exist_ok=True)
    dist = class_distribution(anns)
    with open(out / "class_distribution.csv", "w") as f:
        f.write("class_id,class,count,frequency\n")
        for c, (n, p) in enumerate(zip(dist.counts, dist.freqs), start=1):
            f.write(f"{c},{CLASS_NAMES[c - 1]},{n},{p:.6f}\n")
    prior = estimate_prior(anns, anns[0].width, anns[0].height)
    write_histogram_csv(out / "prior_num_targets.csv", np.arange(len(prior.p_n) + 1) - 0.5,
                        prior.p_n)
    write_histogram_csv(out / "prior_box_area.csv", prior.area_edges, prior.area_hist)
    try:
        kde_paths = write_kde_csvs(samples, out)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print("class  count  frequency")
    for c, (n, p) in enumerate(zip(dist.counts, dist.freqs), start=1):
        print(f"{CLASS_NAMES[c - 1]:<7}{n:>6}  {p:.4f}")
    print(f"mean targets/frame {sum(len(a) for a in anns) / len(anns):.3f}; placement "
          f"uniformity chi2 p = {prior.uniformity_pvalue:.3f}; {len(kde_paths)} KDE files in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffkd", description="Fusion-feature distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value text config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("gen-data", help="generate synthetic train/val/test splits"))
    g.add_argument("--counts", default="2000,200,500", help="train,val,test frame counts")
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train a teacher or student"))
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint or detections file"))
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--detections", help="JSON-lines detections to score instead of a model")
    e.add_argument("--score", type=float)
    e.add_argument("--iou", type=float)
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.set_defaults(func=cmd_eval)

    b = common(sub.add_parser("bench", help="measure per-image inference latency"))
    b.add_argument("--checkpoint", nargs="+")
    b.add_argument("--manifest")
    b.add_argument("--batch-size", dest="batch_size", type=int)
    b.add_argument("--batches", type=int)
    b.add_argument("--warmup", type=int)
    b.set_defaults(func=cmd_bench)

    s = common(sub.add_parser("stats", help="class distribution, priors and KDE CSVs"))
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import FormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FormatError, FileNotFoundError) as e:
        print(f"ffkd {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # noqa: BLE001 - top-level guard maps crashes to exit 1
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
