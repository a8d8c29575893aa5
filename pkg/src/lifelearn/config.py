"""Flat key=value config files mapped onto the dataclass settings.

A config file holds one dotted key per line (``train.alpha = 0.5``),
with ``#`` comments. Sections mirror the dataclasses: ``model.*`` for
the network, ``train.*`` for the two-phase trainer, ``synth.*`` for the
stream generator and ``experiment.*`` for the run harness. Values are
parsed as JSON where possible, so strings, numbers, booleans and arrays
all work; unknown keys are rejected rather than ignored.

Command-line flags are applied after the file, so flags win.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .continual import E2mcConfig
from .errors import ConfigError
from .evaluation import ExperimentConfig
from .model import ModelConfig
from .stream import SynthSpec

_SECTIONS = {
    "model": ModelConfig,
    "train": E2mcConfig,
    "synth": SynthSpec,
    "experiment": ExperimentConfig,
}

# experiment fields that hold nested dataclasses are set via their own sections
_NESTED_EXPERIMENT_FIELDS = {"model", "train"}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    """``{dotted key: parsed value}`` from config-file text."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin} line {lineno}: expected 'key = value', got {raw!r}")
        key, _, rhs = line.partition("=")
        key = key.strip()
        rhs = rhs.strip()
        if not key or not rhs:
            raise ConfigError(f"{origin} line {lineno}: empty key or value")
        if key in values:
            raise ConfigError(f"{origin} line {lineno}: duplicate key {key!r}")
        try:
            values[key] = json.loads(rhs)
        except json.JSONDecodeError:
            values[key] = rhs  # bare strings need no quotes
    return values


def parse_config_file(path) -> dict[str, object]:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), origin=str(path))


def _coerce(key: str, value, target_type):
    """Convert a parsed value to the dataclass field's declared type."""
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true or false, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _field_types(cls) -> dict[str, type | None]:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, type) else None
        if t is None:
            name = str(f.type)
            t = {"int": int, "float": float, "str": str, "bool": bool}.get(name)
        out[f.name] = t
    return out


def _tuple_field(key: str, value, item_type):
    items = value if isinstance(value, list) else [value]
    return tuple(_coerce(key, v, item_type) for v in items)


def apply_config_values(values: dict[str, object]) -> tuple[ExperimentConfig, SynthSpec]:
    """Resolve dotted keys into a fresh (ExperimentConfig, SynthSpec) pair."""
    per_section: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r} (expected section.field)")
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(
                f"unknown config section {section!r}; known: {', '.join(sorted(_SECTIONS))}"
            )
        if section == "experiment" and name in _NESTED_EXPERIMENT_FIELDS:
            raise ConfigError(f"{key}: set this through the '{name}.*' section")
        types = _field_types(cls)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if section == "experiment" and name == "strategies":
            per_section[section][name] = _tuple_field(key, value, str)
        elif section == "experiment" and name == "seeds":
            per_section[section][name] = _tuple_field(key, value, int)
        else:
            t = types[name]
            if t is None:
                raise ConfigError(f"{key}: this field cannot be set from a config file")
            per_section[section][name] = _coerce(key, value, t)

    model = ModelConfig(**per_section["model"])
    train = E2mcConfig(**per_section["train"])
    synth = SynthSpec(**per_section["synth"])
    experiment = ExperimentConfig(model=model, train=train, **per_section["experiment"])
    return experiment, synth


def load_configs(path=None, overrides: dict[str, object] | None = None):
    """(ExperimentConfig, SynthSpec) from an optional file plus overrides.

    ``overrides`` uses the same dotted keys as the file and wins on clashes.
    """
    values = parse_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        values[key] = value
    return apply_config_values(values)
