"""Toolkit configuration: a line-based ``section.key=value`` text file.

Example::

    # comments and blank lines are ignored
    flow.method=lucas_kanade
    model.channels=32
    losses.lambda_kl=1e-6
    training.steps=500
    paths.out_dir=runs/a
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .flow import FlowConfig
from .model import ModelConfig
from .supervision import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    batch: int = 8
    steps: int = 200
    seed: int = 0
    crop_margin: int = 4

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("training.lr must be > 0")
        if self.batch < 1 or self.steps < 1 or self.crop_margin < 0:
            raise ValueError("training.batch and training.steps must be >= 1, crop_margin >= 0")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    weights: str = "weights.tpnw"
    out_dir: str = "out"


@dataclass(frozen=True)
class ToolkitConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _convert(cls, key: str, raw: str):
    hints = typing.get_type_hints(cls)
    kind = hints[key]
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: ToolkitConfig | None = None) -> ToolkitConfig:
    cfg = base or ToolkitConfig()
    sections = {f.name: {} for f in fields(ToolkitConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"line {lineno}: expected section.key=value, got {line!r}")
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        cls = type(getattr(cfg, section))
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"line {lineno}: unknown key {section}.{name}")
        sections[section][name] = _convert(cls, name, value.strip())
    try:
        return replace(cfg, **{s: replace(getattr(cfg, s), **kw) for s, kw in sections.items() if kw})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ToolkitConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: ToolkitConfig) -> str:
    lines = []
    for sf in fields(ToolkitConfig):
        sub = getattr(cfg, sf.name)
        for f in fields(sub):
            lines.append(f"{sf.name}.{f.name}={getattr(sub, f.name)}")
    return "\n".join(lines) + "\n"
