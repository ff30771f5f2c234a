"""Flat ``section.key = value`` configuration files.

One assignment per line, ``#`` starts a comment.  Keys are prefixed by the
section they configure (``fit.max_iters = 30``); values are parsed according
to the annotated type of the matching dataclass field.
"""
from __future__ import annotations

import dataclasses
import types
import typing


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    """Return ``{section: {key: raw_string}}``."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix (e.g. fit.{key})")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _convert(raw: str, kind, key: str):
    origin = typing.get_origin(kind)
    args = [a for a in typing.get_args(kind) if a is not type(None)]
    union = origin is typing.Union or origin is types.UnionType
    if raw.lower() in ("none", "null") and (union or kind is type(None)):
        return None
    if union:
        for a in args:
            try:
                return _convert(raw, a, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: cannot parse {raw!r}")
    if origin in (tuple, list):
        inner = args[0] if args else str
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_convert(s, inner, key) for s in items)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {kind!r}")


def apply_section(cls, values: dict, section: str, base=None):
    """Build ``cls`` from defaults (or ``base``) overridden by ``values``."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _convert(raw, hints[key], f"{section}.{key}")
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def format_config(sections: dict) -> str:
    """Inverse of :func:`parse_config_text` for ``{section: dataclass_instance}``."""
    lines = []
    for section, obj in sections.items():
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
