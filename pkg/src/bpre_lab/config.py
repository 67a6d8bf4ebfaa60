"""Run configurations: JSON or TOML files validated against a JSON schema."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXPERIMENTS = (
    "calibrate", "survival", "theta", "cond-dist", "tau-gap", "path-shape",
    "bottleneck", "walk-check", "bpre-check", "tree-check",
)

_ATOM = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["table", "geometric", "poisson", "binary"]},
        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "lam": {"type": "number", "exclusiveMinimum": 0},
    },
}

_LAW = {
    "oneOf": [
        {"type": "string"},
        {
            "type": "object",
            "required": ["calibrate"],
            "properties": {
                "calibrate": {
                    "type": "object",
                    "required": ["atoms"],
                    "properties": {
                        "atoms": {"type": "array", "minItems": 2, "items": _ATOM},
                        "free": {"type": "integer", "minimum": 0},
                        "others": {"type": "array", "items": {"type": "number"}},
                    },
                }
            },
        },
        {
            "type": "object",
            "required": ["atoms", "weights"],
            "properties": {
                "atoms": {"type": "array", "minItems": 1, "items": _ATOM},
                "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
    ]
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bpre-lab run configuration",
    "type": "object",
    "required": ["experiment", "law"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "law": _LAW,
        "n": {"type": "integer", "minimum": 0},
        "n_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "N": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "shards": {"type": "integer", "minimum": 1},
        "methods": {"type": "array",
                    "items": {"enum": ["naive", "importance", "rao-blackwell", "mixture"]}},
        "t_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "K": {"type": "integer", "minimum": 1},
        "z_max": {"type": "integer", "minimum": 1},
        "thresholds": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}

# named laws usable as ``"law": "<name>"``
NAMED_LAWS: dict[str, dict[str, Any]] = {
    "moderate": {"calibrate": {"atoms": [{"kind": "binary", "p": 0.3},
                                         {"kind": "geometric", "p": 1.0 / 3.0}], "free": 0}},
    "asymptotic": {"calibrate": {"atoms": [{"kind": "binary", "p": 0.1},
                                           {"kind": "poisson", "lambda": 20.0}], "free": 0}},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    law: Any
    n: int | None = None
    n_list: tuple[int, ...] | None = None
    N: int = 10**5
    seed: int = 0
    shards: int = 1
    methods: tuple[str, ...] = ("naive", "importance", "rao-blackwell")
    t_list: tuple[float, ...] = (0.5,)
    grid: tuple[float, ...] = tuple(k / 10 for k in range(1, 10))
    K: int = 16
    z_max: int = 50
    thresholds: dict[str, float] = field(default_factory=dict)

    def law_spec(self) -> dict[str, Any]:
        if isinstance(self.law, str):
            if self.law not in NAMED_LAWS:
                raise ConfigError(f"unknown named law {self.law!r}; known: {sorted(NAMED_LAWS)}")
            return NAMED_LAWS[self.law]
        return self.law

    def environment_law(self):
        from .environment import from_dict

        return from_dict(self.law_spec())

    def as_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items() if v is not None}


def _validate(data: Any, source: str) -> RunConfig:
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{source}: at {where}: {e.message}") from None
    kw = dict(data)
    for key in ("n_list", "methods", "t_list", "grid"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return RunConfig(**kw)


def parse_config(text: str, fmt: str = "json", source: str = "<config>") -> RunConfig:
    """Parse and validate; syntax errors carry line and column numbers."""
    if fmt == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    elif fmt == "toml":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{source}: {e}") from None
    else:
        raise ConfigError(f"unknown config format {fmt!r}")
    return _validate(data, source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    fmt = "toml" if path.suffix.lower() == ".toml" else "json"
    return parse_config(path.read_text(), fmt, str(path))


def from_mapping(data: dict[str, Any]) -> RunConfig:
    return _validate(data, "<mapping>")
