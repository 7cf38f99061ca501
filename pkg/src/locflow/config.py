"""Run configuration: JSON loading and schema validation."""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .cutoff import PROFILES
from .scenarios import SCENARIOS


class ConfigError(ValueError):
    """Invalid configuration or suite file (maps to CLI exit code 2)."""


NUMBER = {"type": "number"}
POSITIVE = {"type": "number", "exclusiveMinimum": 0}
POINT = {"type": "array", "items": NUMBER, "minItems": 2, "maxItems": 4}

GRID_SCHEMA = {
    "type": "object",
    "properties": {
        "dimension": {"type": "integer", "minimum": 2, "maximum": 4},
        "n": {"type": "integer", "minimum": 8},
        "lower": NUMBER,
        "upper": NUMBER,
        "boundary": {"enum": ["periodic", "frozen"]},
    },
    "additionalProperties": False,
}

SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"enum": list(SCENARIOS)},
        "params": {"type": "object"},
        "grid": GRID_SCHEMA,
    },
    "required": ["name"],
    "additionalProperties": False,
}

# center/radius either absolute or as fractions of the chart
CUTOFF_SCHEMA = {
    "type": "object",
    "properties": {
        "center": POINT,
        "center_fraction": POINT,
        "radius": POSITIVE,
        "radius_fraction": POSITIVE,
        "profile": {"enum": list(PROFILES)},
    },
    "oneOf": [{"required": ["radius"]}, {"required": ["radius_fraction"]}],
    "additionalProperties": False,
}

FLOW_SCHEMA = {
    "type": "object",
    "properties": {
        "mode": {"enum": ["direct", "deturck"]},
        "epsilon": {"type": "number", "minimum": 0},
        "T_target": POSITIVE,
        "cfl": POSITIVE,
        "record_stride": {"type": "integer", "minimum": 1},
        "dt_max": POSITIVE,
        "sobolev_budget": {"type": "integer", "minimum": 0},
        "keep_snapshots": {"type": "boolean"},
        "max_steps": {"type": "integer", "minimum": 1},
        "sobolev_drift_limit": POSITIVE,
    },
    "additionalProperties": False,
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "locflow run configuration",
    "type": "object",
    "properties": {
        "scenario": SCENARIO_SCHEMA,
        "metric_file": {"type": "string"},
        "cutoff": CUTOFF_SCHEMA,
        "flow": FLOW_SCHEMA,
        "checks": {"type": "array", "items": {"enum": ["smoothing_bound", "flow_conditions"]},
                   "uniqueItems": True},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
    "oneOf": [{"required": ["scenario"]}, {"required": ["metric_file"]}],
    "required": ["cutoff"],
    "additionalProperties": False,
}


def validate(instance, schema: dict, what: str = "configuration") -> None:
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid {what} at {where}: {exc.message}") from None


def load_json(path) -> object:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def load_run_config(path) -> dict:
    """Read and validate a run configuration; unknown keys are rejected."""
    data = load_json(path)
    validate(data, RUN_CONFIG_SCHEMA, "run configuration")
    return data
