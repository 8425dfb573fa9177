"""Run configuration: one YAML document with a section per component.

Every key has a default except ``paths.manifest`` and ``paths.out_dir``.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .augmentation import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class IngestionConfig:
    resolution_tag: str = ""


@dataclass
class PathsConfig:
    manifest: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    ingestion: IngestionConfig = field(default_factory=IngestionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for key in ("manifest", "out_dir"):
            if not getattr(self.paths, key):
                raise ConfigError(f"missing required key paths.{key}")
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.augment.validate()


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin in (list, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-4" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return str(value)
    return value


def _build_section(name: str, cls, data) -> object:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown key {name}.{k}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key must look like section.key, got {dotted!r}")
    section, key = parts
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r} in override {dotted!r}")
    sec = tree.setdefault(section, {})
    if sec is None:
        sec = tree[section] = {}
    sec[key] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override must be key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def build_run_config(tree: dict | None, overrides=(), base_dir: Path | None = None) -> RunConfig:
    tree = dict(tree or {})
    for sec in tree:
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}")
    tree = {k: (dict(v) if isinstance(v, dict) else v) for k, v in tree.items()}
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(tree, key, value)
    hints = typing.get_type_hints(RunConfig)
    cfg = RunConfig(**{name: _build_section(name, hints[name], tree.get(name)) for name in SECTIONS})
    if base_dir is not None:
        for key in ("manifest", "out_dir"):
            v = getattr(cfg.paths, key)
            if v and not Path(v).is_absolute():
                setattr(cfg.paths, key, str((base_dir / v).resolve()))
    cfg.validate()
    return cfg


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if tree is not None and not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_run_config(tree, overrides, base_dir=path.parent)


def dump_run_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
