"""Binary PPM/PGM images, annotation JSON and split manifests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .synth import CLASS_NAMES, AnnotationSet, MultiModalFrame, SceneSpec, generate_split


class FormatError(ValueError):
    """Malformed file contents; the message carries the byte offset when known."""


def write_pnm(path, img: np.ndarray) -> None:
    """Write an (H,W,3) uint8 array as P6 or an (H,W) array as P5."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _read_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"{path}: unexpected end of header at byte {start}")
    return buf[start:pos], pos


def parse_pnm(buf: bytes, path="<bytes>") -> np.ndarray:
    tok, pos = _read_token(buf, 0, path)
    if tok not in (b"P5", b"P6"):
        raise FormatError(f"{path}: bad magic {tok!r} at byte 0, expected P5 or P6")
    vals = []
    for name in ("width", "height", "maxval"):
        t, pos = _read_token(buf, pos, path)
        if not t.isdigit():
            raise FormatError(f"{path}: invalid {name} {t!r} at byte {pos - len(t)}")
        vals.append(int(t))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} at byte {pos}, expected 255")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive size {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    ch = 3 if tok == b"P6" else 1
    need = w * h * ch
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"{path}: truncated pixel data at byte {len(buf)}: "
                          f"expected {need} bytes after offset {pos}, found {have}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).copy() if ch == 3 else data.reshape(h, w).copy()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_pnm(f.read(), path)


def annotation_to_dict(ann: AnnotationSet) -> dict:
    objs = []
    for i, (b, c) in enumerate(zip(ann.boxes, ann.labels)):
        o = {"bbox": [float(v) for v in b], "class_id": int(c)}
        if i < len(ann.visibility):
            o["visibility"] = ann.visibility[i]
        objs.append(o)
    return {"frame_id": ann.frame_id, "width": ann.width, "height": ann.height, "objects": objs}


def validate_annotation(ann: AnnotationSet, num_classes: int = len(CLASS_NAMES)) -> None:
    for i, (b, c) in enumerate(zip(ann.boxes, ann.labels)):
        x, y, w, h = b
        if not np.all(np.isfinite(b)) or w <= 0 or h <= 0:
            raise ValueError(f"frame {ann.frame_id}: object {i} has degenerate box {list(b)}")
        if x < 0 or y < 0 or x + w > ann.width or y + h > ann.height:
            raise ValueError(f"frame {ann.frame_id}: object {i} box {list(b)} lies outside the "
                             f"{ann.width}x{ann.height} image")
        if not 1 <= c <= num_classes:
            raise ValueError(f"frame {ann.frame_id}: object {i} has unknown class id {c}")


def annotation_from_dict(d: dict, num_classes: int = len(CLASS_NAMES)) -> AnnotationSet:
    try:
        objs = d["objects"]
        ann = AnnotationSet(np.array([o["bbox"] for o in objs], dtype=np.float64).reshape(-1, 4),
                            np.array([o["class_id"] for o in objs], dtype=np.int64),
                            str(d.get("frame_id", "")), int(d["width"]), int(d["height"]),
                            [o["visibility"] for o in objs if "visibility" in o])
    except (KeyError, TypeError) as e:
        raise ValueError(f"frame {d.get('frame_id', '?')}: malformed annotation ({e!r})") from e
    validate_annotation(ann, num_classes)
    return ann


def save_annotation(path, ann: AnnotationSet) -> None:
    validate_annotation(ann)
    Path(path).write_text(json.dumps(annotation_to_dict(ann)))


def load_annotation(path, num_classes: int = len(CLASS_NAMES)) -> AnnotationSet:
    return annotation_from_dict(json.loads(Path(path).read_text()), num_classes)


def write_split(out_dir, split: str, samples: Sequence, spec: SceneSpec) -> Path:
    """Write frames and annotations for one split plus its manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / split
    img_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for frame, ann in samples:
        fid = frame.frame_id
        rel = {"rgb": f"{split}/{fid}_rgb.ppm", "thm": f"{split}/{fid}_thm.pgm",
               "ann": f"{split}/{fid}.json"}
        write_pnm(out_dir / rel["rgb"], frame.rgb)
        write_pnm(out_dir / rel["thm"], frame.thm)
        save_annotation(out_dir / rel["ann"], ann)
        items.append(rel)
    manifest = out_dir / f"{split}.json"
    manifest.write_text(json.dumps({"split": split, "items": items, "spec_hash": spec.hash(),
                                    "spec": spec.to_dict()}, indent=1))
    return manifest


def load_manifest(path, expected_hash: Optional[str] = None):
    """Load (frame, annotation) pairs listed in a manifest."""
    path = Path(path)
    m = json.loads(path.read_text())
    if expected_hash is not None and m.get("spec_hash") != expected_hash:
        raise ValueError(f"{path}: spec hash {m.get('spec_hash')} does not match {expected_hash}")
    base = path.parent
    out = []
    for item in m["items"]:
        ann = load_annotation(base / item["ann"])
        frame = MultiModalFrame(read_pnm(base / item["rgb"]), read_pnm(base / item["thm"]),
                                ann.frame_id)
        out.append((frame, ann))
    return out


def make_splits(spec: SceneSpec, counts: dict, out_dir, seed: Optional[int] = None) -> dict:
    """Generate train/val/test on disjoint per-frame streams and write manifests."""
    paths = {}
    for split, n in counts.items():
        samples = generate_split(spec, split, int(n), seed)
        paths[split] = write_split(out_dir, split, samples, spec)
    return paths
