"""Flat `key = value` config files with one section per subcommand.

    # comments start with '#' or ';'
    [train]
    objective = reverse-kl
    energy = u3
    rho = none          # 'none' selects the built-in default

Values are typed by the target dataclass: ints, floats, strings, `none`,
and comma-separated tuples. Resolution order is defaults < file < flags.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


def _kind(cls, name: str, default) -> str:
    hint = str(get_type_hints(cls).get(name, type(default).__name__))
    for k in ("tuple", "bool", "int", "float", "str"):
        if k in hint:
            return k
    return "str"


def parse_value(cls, name: str, raw: str):
    """Convert a config string to the type of `cls.name`."""
    f = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if f is None:
        raise ConfigError(f"unknown key {name!r} for {cls.__name__}")
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    default = f.default if f.default is not dataclasses.MISSING else None
    kind = _kind(cls, name, default)
    try:
        if kind == "tuple":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {name} ({kind})") from exc
    return raw


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def read_section(path, section: str, cls) -> dict[str, Any]:
    """Typed overrides for `cls` from one section of a config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not parser.has_section(section):
        return {}
    return {k: parse_value(cls, k, v) for k, v in parser.items(section)}


def resolve(cls, file_values: dict | None = None, flag_values: dict | None = None):
    """defaults < file < flags; flags set to None are treated as absent."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(section: str, cfg) -> str:
    """Canonical text form: every field, in declaration order."""
    lines = [f"[{section}]"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
