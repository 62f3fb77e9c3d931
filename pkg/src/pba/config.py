"""JSON run configuration.

A config file is one object with up to four sections whose keys mirror the
dataclass field names::

    {
      "search":  {"master_seed": 0, "population_size": 16, ...},   # SearchConfig
      "trainer": {"learning_rate": 0.1, "epochs": 60, ...},        # TrainerConfig
      "data":    {"seed": 0, "image_size": 16, ...},               # SyntheticSpec
      "harness": {"seed": 0, "eval_every": 1, ...}                 # HarnessConfig
    }

``data`` may instead name a raw dataset: ``{"manifest": "path.json",
"reduce": 4000, "reduce_seed": 0}`` (the path is relative to the config
file).  Fields without a default are required; every problem is reported as
a :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .data import DatasetSplits, SyntheticSpec, generate_synthetic, load_raw, reduce_split
from .pbt import SearchConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HarnessConfig:
    """Settings of the replay and baseline commands."""

    seed: int = 0
    eval_every: int = 1
    interval_len_min: int = 1
    interval_len_max: int = 40

    def __post_init__(self):
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")


@dataclass(frozen=True)
class RawDataConfig:
    manifest: str
    reduce: Optional[int] = None
    reduce_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    search: Optional[SearchConfig]
    trainer: TrainerConfig
    data: SyntheticSpec | RawDataConfig
    harness: HarnessConfig
    base_dir: Path

    def require_search(self) -> SearchConfig:
        if self.search is None:
            raise ConfigError("search: section is required for this command")
        return self.search

    def load_data(self) -> DatasetSplits:
        if isinstance(self.data, SyntheticSpec):
            return generate_synthetic(self.data)
        path = Path(self.data.manifest)
        if not path.is_absolute():
            path = self.base_dir / path
        splits = load_raw(path)
        if self.data.reduce is not None:
            splits = reduce_split(splits, self.data.reduce, self.data.reduce_seed)
        return splits


_SECTIONS = ("search", "trainer", "data", "harness")


def _check_type(value: Any, hint, where: str):
    """Return ``value`` coerced to ``hint`` or raise a ConfigError."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return tuple(_check_type(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:  # pragma: no cover - all config fields use the types above
        raise TypeError(f"unsupported config type {hint!r}")
    if not ok:
        raise ConfigError(f"{where}: expected {hint.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, obj: Any, section: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{section}: expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown field")
    kwargs = {}
    for name, f in fields.items():
        where = f"{section}.{name}"
        if name not in obj:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{where}: required field missing")
            continue
        kwargs[name] = _check_type(obj[name], hints[name], where)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(obj: Any, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be an object")
    for key in obj:
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section (expected one of {', '.join(_SECTIONS)})")
    if "data" not in obj:
        raise ConfigError("data: required section missing")
    data = obj["data"]
    if isinstance(data, dict) and "manifest" in data:
        data_cfg = _build(RawDataConfig, data, "data")
    else:
        data_cfg = _build(SyntheticSpec, data, "data")
    return RunConfig(
        search=_build(SearchConfig, obj["search"], "search") if "search" in obj else None,
        trainer=_build(TrainerConfig, obj.get("trainer", {}), "trainer"),
        data=data_cfg,
        harness=_build(HarnessConfig, obj.get("harness", {}), "harness"),
        base_dir=base_dir,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(obj, path.parent)
