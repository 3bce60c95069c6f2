"""Key-value text configs for training and data generation."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossWeights

MODES = ("fusion", "rgb", "thermal", "distill")
ROLES = ("teacher", "student")


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(value: str, typ, key: str):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union and type(None) in args:
        if value.lower() in ("", "none", "null"):
            return None
        typ = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(typ), typing.get_args(typ)
    try:
        if typ is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
        if origin is tuple:
            parts = [p.strip() for p in value.strip("()[]").split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_convert(p, args[0], key) for p in parts)
            return tuple(_convert(p, a, key) for p, a in zip(parts, args))
    except ValueError as e:
        raise ConfigError(f"invalid value {value!r} for {key!r} ({typ})") from e
    raise ConfigError(f"unsupported field type for {key!r}: {typ}")


def convert_kv(cls, kv: dict, skip=()) -> dict:
    """Convert string values to the annotated field types of dataclass ``cls``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, value in kv.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _convert(value, hints[key], key)
    return kwargs


@dataclass(frozen=True)
class TrainConfig:
    role: str = "teacher"
    mode: str = "fusion"
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    teacher_checkpoint: Optional[str] = None
    out_dir: str = "runs/train"
    max_train_frames: Optional[int] = None
    max_val_frames: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "distill":
            if self.role != "student":
                raise ConfigError("distill mode trains a student")
            if not self.teacher_checkpoint:
                raise ConfigError("distill mode requires teacher_checkpoint")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr:
            raise ConfigError(f"need 0 < lr_min <= lr, got lr={self.lr}, lr_min={self.lr_min}")

    @property
    def modality(self) -> str:
        return "fusion" if self.mode == "distill" else self.mode

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        kv = parse_kv_text(text, source)
        wkeys = {f.name for f in dataclasses.fields(LossWeights)}
        wkv = {k: kv.pop(k) for k in list(kv) if k in wkeys}
        try:
            weights = LossWeights(**convert_kv(LossWeights, wkv))
            return cls(**convert_kv(cls, kv, skip=("weights",)), weights=weights)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: {e}") from e

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def scene_spec_from_text(text: str, source: str = "<spec>"):
    """SceneSpec from key-value text; tuple fields take comma-separated values.

    ``sizes`` is given as 12 comma-separated integers (w_min, w_max, h_min,
    h_max per class) and split into per-class groups.
    """
    from .data import SceneSpec

    kv = parse_kv_text(text, source)
    d = {}
    for k, v in kv.items():
        if k in ("class_freq", "visibility"):
            d[k] = tuple(float(x) for x in v.strip("()[]").split(",") if x.strip())
        elif k == "sizes":
            vals = [int(x) for x in v.replace("(", " ").replace(")", " ").replace(",", " ").split()]
            if len(vals) % 4:
                raise ConfigError(f"{source}: sizes needs groups of four integers")
            d[k] = tuple(tuple(vals[i:i + 4]) for i in range(0, len(vals), 4))
        elif k == "n_fixed":
            d[k] = None if v.lower() in ("", "none") else int(v)
        elif k in ("width", "height", "n_max", "rgb_clutter", "seed"):
            d[k] = int(v)
        elif k in ("lam", "rgb_noise", "thm_noise", "max_overlap"):
            d[k] = float(v)
        else:
            raise ConfigError(f"{source}: unknown scene spec key {k!r}")
    try:
        return SceneSpec(**d)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e
