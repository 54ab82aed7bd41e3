"""``key = value`` configuration files with a typed schema.

Lines are UTF-8; ``#`` starts a comment; keys are flat dotted names such as
``flow.n_iters``. Unknown keys and missing required keys are errors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

SEED_ENV = "REPFLOW_SEED"


class ConfigError(ValueError):
    pass


_REQUIRED = object()


@dataclass(frozen=True)
class Field:
    parse: object
    default: object = _REQUIRED

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


def parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_list(item):
    def parse(s: str):
        parts = [p.strip() for p in s.split(",")]
        if not parts or any(p == "" for p in parts):
            raise ValueError(f"malformed list {s!r}")
        return tuple(item(p) for p in parts)

    return parse


def parse_text(text: str) -> dict:
    """Split a config body into raw ``{key: value}`` strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(text: str, schema: dict, env=None) -> dict:
    """Validate raw text against ``schema`` (``key -> Field``) and return typed values.

    ``REPFLOW_SEED`` in ``env`` (default: the process environment) overrides
    the ``seed`` key when the schema has one.
    """
    env = os.environ if env is None else env
    raw = parse_text(text)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "seed" in schema and env.get(SEED_ENV) not in (None, ""):
        raw["seed"] = env[SEED_ENV]
    out = {}
    for key, fld in schema.items():
        if key not in raw:
            if fld.required:
                raise ConfigError(f"missing required config key: {key}")
            out[key] = fld.default
            continue
        try:
            out[key] = fld.parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return out


def read_config(path: str | os.PathLike, schema: dict, env=None) -> dict:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read(), schema, env)
