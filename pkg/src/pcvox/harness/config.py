"""Experiment configuration: a line-based ``key = value`` file plus CLI overrides.

Blank lines and ``#`` comments are ignored. Sequences are comma separated.
Every field can be overridden by a ``--field-name`` flag.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Tuple, Union

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # data
    families: Tuple[str, ...] = ("sphere", "torus", "superquadric", "box_union")
    train_count: int = 200
    test_count: int = 20
    depth: int = 8
    extent_min: float = 36.0
    extent_max: float = 56.0
    density: float = 6.0
    # optimization, shared by both stages
    batch_size: int = 8
    lr_decay_every: int = 5
    lr_decay_factor: float = 0.5
    # surrogate
    surrogate_channels: int = 32
    coarse_levels: int = 2
    surrogate_epochs: int = 10
    surrogate_lr: float = 1e-4
    # voxnet
    voxnet_channels: int = 32
    voxnet_blocks: int = 2
    voxnet_epochs: int = 30
    voxnet_lr: float = 1e-3
    voxnet_train_count: int = 64
    voxnet_scales: Tuple[float, ...] = (0.5, 0.25)
    lambdas: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    # evaluation
    scales: Tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    flops_parents: int = 1000

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def override(self, **values) -> "ExperimentConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in values.items()})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    default = getattr(_DEFAULTS, key)
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else type(default)(value)
    try:
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(x.strip()) for x in value.split(",") if x.strip())
        return type(default)(value.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {n}: unknown key {key!r}")
        values[key] = value
    return values


def load_config(path: Union[str, Path, None] = None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig().override(**values)


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """``--config FILE`` and one string-valued flag per configuration key."""
    parser.add_argument("--config", help="key = value configuration file")
    group = parser.add_argument_group("configuration overrides")
    for name in _FIELDS:
        group.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                           metavar=type(getattr(_DEFAULTS, name)).__name__.upper())


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, **{k: getattr(args, k, None) for k in _FIELDS})


__all__ = ["ExperimentConfig", "load_config", "parse_config_text", "add_config_arguments",
           "config_from_args"]
