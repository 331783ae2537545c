"""On-disk run configuration: generator settings, training settings and paths.

The file is INI-style text with four sections::

    [run]        preset, desk
    [generator]  GeneratorConfig fields
    [train]      TrainConfig fields
    [paths]      dataset, checkpoint, out_dir

Tuples are written comma-separated. Resolution order is defaults, then the
preset, then the desk-scale adjustments, then explicit file values, then
command-line overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import GeneratorConfig
from .errors import InvalidArgumentError
from .training import DESK_OVERRIDES, PRESETS, TrainConfig

log = logging.getLogger(__name__)

PATH_KEYS = ("dataset", "checkpoint", "out_dir")
RUN_KEYS = ("preset", "desk")


@dataclass
class RunConfig:
    preset: str | None = None
    desk: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict[str, str] = field(default_factory=lambda: {k: "" for k in PATH_KEYS})


def _parse_scalar(tp, text: str):
    text = text.strip()
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidArgumentError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def parse_value(tp, text: str):
    """Parse ``text`` as the annotated field type ``tp``."""
    if typing.get_origin(tp) is tuple:
        (elem, *_) = typing.get_args(tp)
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        try:
            return tuple(_parse_scalar(elem, p) for p in parts)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad list value {text!r}: {exc}") from None
    try:
        return _parse_scalar(tp, text)
    except ValueError as exc:
        raise InvalidArgumentError(f"bad value {text!r}: {exc}") from None


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_overrides(obj, values: dict, source: str):
    """Return a copy of dataclass ``obj`` with ``values`` (already typed) applied."""
    types = _field_types(type(obj))
    unknown = set(values) - set(types)
    if unknown:
        raise InvalidArgumentError(f"unknown {type(obj).__name__} keys in {source}: {sorted(unknown)}")
    for k, v in values.items():
        old = getattr(obj, k)
        if old != v:
            log.info("%s overrides %s: %r -> %r", source, k, old, v)
    return dataclasses.replace(obj, **values)


def base_train_config(preset: str | None, desk: bool) -> TrainConfig:
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise InvalidArgumentError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if desk:
        values.update(DESK_OVERRIDES)
    return TrainConfig(**values)


def _typed_section(parser: configparser.ConfigParser, name: str, cls) -> dict:
    if not parser.has_section(name):
        return {}
    types = _field_types(cls)
    out = {}
    for key, text in parser.items(name):
        if key not in types:
            raise InvalidArgumentError(f"unknown key {key!r} in [{name}]")
        out[key] = parse_value(types[key], text)
    return out


def parse_run_config(text: str, source: str = "config") -> RunConfig:
    """Parse INI text into a RunConfig, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise InvalidArgumentError(f"cannot parse {source}: {exc}") from None
    extra = set(parser.sections()) - {"run", "generator", "train", "paths"}
    if extra:
        raise InvalidArgumentError(f"unknown sections in {source}: {sorted(extra)}")

    preset, desk = None, False
    if parser.has_section("run"):
        for key, value in parser.items("run"):
            if key not in RUN_KEYS:
                raise InvalidArgumentError(f"unknown key {key!r} in [run]")
        preset = parser.get("run", "preset", fallback="").strip() or None
        desk = parse_value(bool, parser.get("run", "desk", fallback="false"))

    train = apply_overrides(base_train_config(preset, desk), _typed_section(parser, "train", TrainConfig), source)
    gen = GeneratorConfig(**_typed_section(parser, "generator", GeneratorConfig))
    paths = {k: "" for k in PATH_KEYS}
    if parser.has_section("paths"):
        for key, value in parser.items("paths"):
            if key not in PATH_KEYS:
                raise InvalidArgumentError(f"unknown key {key!r} in [paths]")
            paths[key] = value.strip()
    return RunConfig(preset=preset, desk=desk, generator=gen, train=train, paths=paths)


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {p}: {exc}") from exc
    return parse_run_config(text, source=str(p))


def dump_run_config(rc: RunConfig) -> str:
    """Full resolved config as INI text; ``parse_run_config`` inverts it."""
    buf = io.StringIO()
    buf.write("[run]\n")
    buf.write(f"preset = {rc.preset or ''}\n")
    buf.write(f"desk = {format_value(rc.desk)}\n")
    for name, obj in (("generator", rc.generator), ("train", rc.train)):
        buf.write(f"\n[{name}]\n")
        for f in dataclasses.fields(obj):
            buf.write(f"{f.name} = {format_value(getattr(obj, f.name))}\n")
    buf.write("\n[paths]\n")
    for k in PATH_KEYS:
        buf.write(f"{k} = {rc.paths.get(k, '')}\n")
    return buf.getvalue()
