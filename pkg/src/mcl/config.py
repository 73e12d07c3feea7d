"""Run configuration: a typed tree, a flat key=value file format, and a
content hash for checkpoint compatibility checks.

Files hold one `section.field = value` assignment per line with `#`
comments; every key must name an existing field, so typos fail loudly
instead of silently training with defaults. Tuples are written as
comma-separated integers. The hash covers the canonical dump of every
field, making it stable under reordering and comments.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .loss import MATCH_MODES
from .model import NetConfig


@dataclass(frozen=True)
class DataConfig:
    kind: str = "procedural-shapes"
    root: str = ""
    n_train: int = 2000
    n_eval: int = 500
    classes: int = 10
    image_h: int = 64
    image_w: int = 64
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    pyramid_levels: int = 3
    pyramid_channels: int = 64
    head_depth: int = 4
    proj_hidden: int = 256
    embed_dim: int = 64
    fpn: bool = True

    def net_config(self) -> NetConfig:
        return NetConfig(
            stage_channels=self.stage_channels,
            pyramid_levels=self.pyramid_levels,
            pyramid_channels=self.pyramid_channels,
            head_depth=self.head_depth,
            proj_hidden=self.proj_hidden,
            embed_dim=self.embed_dim,
            fpn=self.fpn)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    levels: int = 3
    mode: str = "a"
    objective: str = "ssl"
    tau: float = 0.2
    boundary_k: float = 0.0
    level_weights: str = "pyramid"
    lr_scale: float = 1.0
    sgd_lr: float = 0.05
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    warmup_epochs: int = 3
    ema_momentum: float = 0.99
    log_every: int = 1
    ckpt_every_epochs: int = 10
    out_dir: str = "runs/run"


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.3
    epochs: int = 30
    batch_size: int = 128
    momentum: float = 0.9


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


_SECTIONS = ("data", "model", "train", "probe")


def _field_types(section_obj) -> dict[str, type]:
    return typing.get_type_hints(type(section_obj))


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is str:
        return text
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typing.get_origin(typ) is tuple:
        return tuple(int(p) for p in text.split(",") if p.strip())
    raise ValueError(f"unsupported field type {typ}")


def _render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: Config, overrides: dict[str, str]) -> Config:
    """Set dotted keys from string values, type-checked per field."""
    staged: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ValueError(f"unknown config key {key!r}")
        sec_obj = getattr(cfg, section)
        types = _field_types(sec_obj)
        if name not in types:
            raise ValueError(f"unknown config key {key!r}")
        staged[section][name] = _parse_value(str(raw), types[name])
    parts = {s: dataclasses.replace(getattr(cfg, s), **staged[s])
             for s in _SECTIONS if staged[s]}
    return dataclasses.replace(cfg, **parts)


def parse_config_text(text: str, base: Config | None = None) -> Config:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip()] = value.strip()
    return apply_overrides(base if base is not None else Config(), overrides)


def load_config(path: str, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read(), base=base)


def config_lines(cfg: Config) -> list[str]:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_render_value(getattr(obj, f.name))}")
    return lines


def save_config(cfg: Config, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(config_lines(cfg)) + "\n")


def config_hash(cfg: Config) -> str:
    canon = "\n".join(config_lines(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def validate_config(cfg: Config) -> None:
    """Cross-field checks shared by every entry point."""
    t, d, m = cfg.train, cfg.data, cfg.model
    if d.kind not in ("procedural-shapes", "image-directory"):
        raise ValueError(f"unknown data kind {d.kind!r}")
    if d.kind == "image-directory" and not d.root:
        raise ValueError("image-directory data needs data.root")
    if t.mode not in MATCH_MODES:
        raise ValueError(f"unknown matching mode {t.mode!r}")
    if t.objective not in ("ssl", "supervised"):
        raise ValueError(f"unknown objective {t.objective!r}")
    if t.levels < 1:
        raise ValueError("need at least one montage level")
    if t.levels > m.pyramid_levels:
        raise ValueError(
            f"{t.levels} montage levels exceed the {m.pyramid_levels}-level pyramid")
    if t.level_weights not in ("pyramid", "uniform"):
        raise ValueError(f"unknown level weighting {t.level_weights!r}")
    div = 2 ** (t.levels - 1)
    if d.image_h % div or d.image_w % div:
        raise ValueError(
            f"image size {d.image_h}x{d.image_w} not divisible by {div}")
    if t.batch_size % 4 ** (t.levels - 1):
        raise ValueError(
            f"batch {t.batch_size} not divisible by {4 ** (t.levels - 1)}")
    if not 0 <= t.warmup_epochs <= t.epochs:
        raise ValueError(
            f"warmup {t.warmup_epochs} epochs outside [0, {t.epochs}]")
    if t.boundary_k < 0:
        raise ValueError("boundary_k must be non-negative")
    m.net_config()  # delegates pyramid/stage consistency checks
