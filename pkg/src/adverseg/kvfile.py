"""Plain-text ``key = value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Iterable, Mapping


class ConfigKeyError(KeyError):
    pass


def parse_lines(lines: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.rstrip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read(path) -> dict[str, str]:
    return parse_lines(Path(path).read_text().splitlines())


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    return parse_lines(items)


def _coerce(text: str, tp) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0])
    if origin in (tuple, list):
        parts = [p.strip() for p in text.strip("()[] ").split(",") if p.strip()]
        elem = args[0] if args else str
        vals = [_coerce(p, elem) for p in parts]
        return tuple(vals) if origin is tuple else vals
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def apply(cls, values: Mapping[str, str], base=None):
    """Build (or update ``base``) a dataclass from string values; unknown keys raise."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigKeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in values.items()}
    if base is None:
        return cls(**kwargs)
    return dataclasses.replace(base, **kwargs)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(obj) -> str:
    return "".join(f"{f.name} = {_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
