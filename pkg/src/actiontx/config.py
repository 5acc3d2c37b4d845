"""Sectioned key=value run configuration with typed fields.

Sections map onto dataclasses: ``[model]`` -> ModelConfig, ``[train]`` ->
TrainConfig, ``[data]`` -> DataConfig and ``[eval]`` -> EvalConfig. Unknown
sections or keys are rejected, and every error names the offending field.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from .model import ModelConfig
from .synthdata import SceneSpec
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    frames: int = 8
    min_actors: int = 1
    max_actors: int = 4
    min_objects: int = 1
    max_objects: int = 2
    p_alarm: float = 0.3
    train_clips: int = 500
    test_clips: int = 200
    test_start: int = 100_000
    data_dir: str = ""
    test_dir: str = ""

    def scene_spec(self, frames: Optional[int] = None) -> SceneSpec:
        return SceneSpec(seed=self.seed, height=self.height, width=self.width,
                         frames=self.frames if frames is None else frames,
                         min_actors=self.min_actors, max_actors=self.max_actors,
                         min_objects=self.min_objects, max_objects=self.max_objects, p_alarm=self.p_alarm)


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    strict_threshold: Optional[float] = 0.75
    bins: int = 3
    background_threshold: Optional[float] = None
    eval_frames: int = 0          # 0: same clip length as training
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}


SECTIONS = ("model", "train", "data", "eval")


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, default, optional: bool = False):
    text = raw.strip()
    if text.lower() == "none":
        if optional or default is None:
            return None
        raise ConfigError(name, "may not be none")
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as e:
        raise ConfigError(name, str(e)) from None


def _apply(section: str, obj, values: dict):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", f"unknown key (valid: {', '.join(sorted(known))})")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else getattr(obj, key)
        updates[key] = _coerce(f"{section}.{key}", raw, default, "Optional" in str(f.type))
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as e:
        raise ConfigError(section, str(e)) from None


def parse_overrides(items: Sequence[str]) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(lhs, "override key must be section.key")
        section, key = lhs.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(lhs, f"unknown section (valid: {', '.join(SECTIONS)})")
        out.setdefault(section, {})[key.strip()] = value
    return out


def load_config(path=None, overrides: Sequence[str] = (), text: Optional[str] = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``section.key=value`` overrides."""
    values: dict = {}
    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            if text is not None:
                cp.read_string(text)
            else:
                with open(path) as f:
                    cp.read_file(f)
        except OSError as e:
            raise ConfigError(str(path), f"cannot read config: {e.strerror}") from None
        except configparser.Error as e:
            raise ConfigError(str(path or "<text>"), f"malformed config: {e}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(section, f"unknown section (valid: {', '.join(SECTIONS)})")
            values[section] = dict(cp[section])
    for section, kv in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(kv)
    run = RunConfig()
    parts = {s: _apply(s, getattr(run, s), values.get(s, {})) for s in SECTIONS}
    return RunConfig(**parts)


def write_config(run: RunConfig, path) -> None:
    Path(path).write_text(run.to_ini())
