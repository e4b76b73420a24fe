"""Flat key=value configuration files with dotted section prefixes.

One assignment per line (`construct.steps=1200`); blank lines and lines
starting with `#` are skipped. Values stay strings here; consumers coerce.
"""
from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, IoError


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def take(cfg: dict[str, str], key: str, cast, default):
    """Pop a key with type coercion; ConfigError on a bad value."""
    if key not in cfg:
        return default
    raw = cfg.pop(key)
    try:
        if cast is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {cast.__name__}") from None


def reject_unknown(cfg: dict[str, str], context: str) -> None:
    if cfg:
        raise ConfigError(f"unknown {context} keys: {', '.join(sorted(cfg))}")
