"""Pipeline configuration: typed ``section.key = value`` text files.

Every field has a default, unknown keys are rejected, and serializing then
parsing returns an equal config.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from vai.augment import AugmentConfig
from vai.envs import SpriteWorldConfig
from vai.invariance import AdapterConfig
from vai.keypoint import TransporterConfig
from vai.policy import PolicyConfig
from vai.sac import SacConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"


@dataclass
class DatasetConfig:
    count: int = 5000
    texture: str = "grid"


@dataclass
class AttentionConfig:
    quantile: float = 0.9
    epsilon: float | None = None
    calibration_frames: int = 256


@dataclass
class EvaluationConfig:
    textures: tuple[str, ...] = ("grid", "noise", "wood", "marble", "fabric", "metal", "blanket")
    seeds: int = 10
    episodes: int = 100
    denoise_alpha: float | None = None
    denoise_beta: float = 0.05


@dataclass
class VisualizeConfig:
    count: int = 6
    texture: str = "grid"


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    env: SpriteWorldConfig = field(default_factory=SpriteWorldConfig)
    transporter: TransporterConfig = field(default_factory=TransporterConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    visualize: VisualizeConfig = field(default_factory=VisualizeConfig)

    def policy_config(self) -> PolicyConfig:
        return dataclasses.replace(self.policy, sac=self.sac)


SECTIONS = [f.name for f in dataclasses.fields(PipelineConfig)]


def _scalar_fields(section_obj):
    hints = typing.get_type_hints(type(section_obj))
    for f in dataclasses.fields(section_obj):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            continue
        yield f.name, tp


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def parse_value(text: str, tp):
    text = text.strip()
    tp, optional = _strip_optional(tp)
    if optional and text.lower() == "none":
        return None
    origin = typing.get_origin(tp)
    if tp is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp in (int, float, str):
        return tp(text)
    if origin is tuple:
        args = typing.get_args(tp)
        items = [s.strip() for s in text.split(",")] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(parse_value(s, args[0]) for s in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(parse_value(s, a) for s, a in zip(items, args))
    if origin is dict:
        kt, vt = typing.get_args(tp)
        out = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            k, v = item.split(":", 1)
            out[parse_value(k, kt)] = parse_value(v, vt)
        return out
    raise TypeError(f"unsupported config type {tp}")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{format_value(v)}" for k, v in value.items())
    return repr(value) if isinstance(value, float) else str(value)


def set_key(cfg: PipelineConfig, dotted: str, raw: str) -> None:
    if "." not in dotted:
        raise ConfigError(f"config key must look like section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (key {dotted!r})")
    obj = getattr(cfg, section)
    types_ = dict(_scalar_fields(obj))
    if key not in types_:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = parse_value(raw, types_[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from exc
    try:
        setattr(cfg, section, dataclasses.replace(obj, **{key: value}))
    except ValueError as exc:
        raise ConfigError(f"invalid {dotted}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    cfg = PipelineConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {line!r}")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for key, _ in _scalar_fields(obj):
            lines.append(f"{section}.{key} = {format_value(getattr(obj, key))}")
    return "\n".join(lines) + "\n"
