"""Plain-text ``key = value`` configuration files.

The on-disk format is one assignment per line; blank lines and lines
starting with ``#`` are ignored.  Values are coerced against a dataclass'
field types, so a config class doubles as its own schema.  Tuples are
written as comma-separated scalars.
"""

import dataclasses
import types
import typing
from pathlib import Path

from .errors import InvalidConfig


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key/value lines into a string map."""
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{no}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise InvalidConfig(f"{source}:{no}: empty key")
        out[key] = value.strip()
    return out


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(encoding="utf-8"), source=str(path))


def _coerce(name: str, text: str, ftype):
    origin = typing.get_origin(ftype)
    if origin is typing.Union or origin is types.UnionType:
        # Optional[...]: try each member, None spelled as empty/none.
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _coerce(name, text, args[0])
    if origin is tuple:
        elem = typing.get_args(ftype)[0]
        items = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_coerce(name, p, elem) for p in items)
    if ftype is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidConfig(f"{name}: expected a boolean, got {text!r}")
    if ftype is int:
        try:
            return int(text)
        except ValueError:
            raise InvalidConfig(f"{name}: expected an integer, got {text!r}") from None
    if ftype is float:
        try:
            return float(text)
        except ValueError:
            raise InvalidConfig(f"{name}: expected a number, got {text!r}") from None
    if ftype is str:
        return text
    raise InvalidConfig(f"{name}: unsupported config field type {ftype!r}")


def config_from_mapping(cls, mapping: dict[str, str], *, strict: bool = True):
    """Build a config dataclass from a string map, coercing each field."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if strict and unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in mapping:
            kwargs[f.name] = _coerce(f.name, mapping[f.name], hints[f.name])
    return cls(**kwargs)


def config_from_file(cls, path, *, strict: bool = True):
    return config_from_mapping(cls, parse_kv_file(path), strict=strict)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg) -> str:
    """Render a config dataclass back to key = value text, sorted by key."""
    items = dataclasses.asdict(cfg)
    lines = [f"{k} = {format_value(items[k])}" for k in sorted(items)]
    return "\n".join(lines) + "\n"
