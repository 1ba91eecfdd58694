"""Flat ``section.key = value`` configuration with typed validation.

Precedence when resolving: explicit overrides > config file > dataclass defaults.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aat import AATConfig
from .data import SynthConfig
from .detector import DetectorConfig
from .evaluation import EvalConfig
from .inference import WindowSpec
from .matching import LossWeights
from .training import TrainConfig

ENV_CONFIG_DIR = "ACFORMER_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "acformer.toml"

SECTIONS = {
    "aat": AATConfig,
    "detector": DetectorConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "window": WindowSpec,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


class ConfigFileError(ValueError):
    pass


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigFileError(f"{key}: expected a list, got {value!r}")
        return tuple(_coerce(v, args[0], key) for v in value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigFileError(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigFileError(f"{key}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigFileError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigFileError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigFileError(f"{key}: expected a number, got {value!r}") from None
    if tp is str:
        return str(value)
    return value


def _flatten(doc: dict, prefix: str = "") -> dict[str, object]:
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def validate(flat: dict[str, object]) -> dict[str, object]:
    out = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigFileError(f"unknown config key {key!r}; sections are {', '.join(SECTIONS)}")
        types_ = _field_types(SECTIONS[section])
        if name not in types_:
            raise ConfigFileError(f"unknown config key {key!r}; valid: {', '.join(sorted(types_))}")
        out[key] = _coerce(value, types_[name], key)
    return out


def default_config_path() -> Path | None:
    root = os.environ.get(ENV_CONFIG_DIR)
    if not root:
        return None
    path = Path(root) / DEFAULT_CONFIG_NAME
    return path if path.exists() else None


def read_config_file(path) -> dict[str, object]:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    return validate(_flatten(doc))


def parse_overrides(items: list[str]) -> dict[str, object]:
    flat = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigFileError(f"override {item!r} must look like section.key=value")
        flat[key.strip()] = value.strip()
    return validate(flat)


@dataclasses.dataclass
class ResolvedConfig:
    values: dict[str, object]

    def section(self, name: str):
        cls = SECTIONS[name]
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}
        return cls(**kwargs)

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        section, _, name = key.partition(".")
        return getattr(SECTIONS[section](), name)


def resolve(config_path=None, overrides: dict[str, object] | None = None) -> ResolvedConfig:
    values: dict[str, object] = {}
    path = config_path or default_config_path()
    if path is not None:
        values.update(read_config_file(path))
    values.update(overrides or {})
    return ResolvedConfig(values)


def dump(resolved: ResolvedConfig) -> str:
    """Render every key (defaults included) as flat ``section.key = value`` lines."""
    lines = []
    for section, cls in SECTIONS.items():
        obj = resolved.section(section)
        for f in dataclasses.fields(cls):
            value = getattr(obj, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{section}.{f.name} = {_toml_literal(value)}")
    return "\n".join(lines) + "\n"


def _toml_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    return repr(value)
