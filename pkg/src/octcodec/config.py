"""Plain ``key = value`` run configuration files."""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Parse ``key = value`` lines. ``#`` starts a comment; keys may use dashes
    or underscores. Values stay strings; the CLI converts them."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            key = key.replace("-", "_")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out
