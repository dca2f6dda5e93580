"""Run configuration: strict JSON schema, defaults and ``CLSPEC_`` environment overrides.

Precedence is file < environment < command-line flags. Nested keys are
addressed in the environment with a double underscore, e.g.
``CLSPEC_PLAN__SAMPLES=20`` or ``CLSPEC_SOLVER__TOL=1e-13``. Values are
parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import jsonschema

from .errors import SchemaViolation

ENV_PREFIX = "CLSPEC_"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}

_PROFILE_ITEM = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "power_law", "two_block", "explicit"]},
        "value": {"type": "number", "minimum": 1},
        "mu": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
        "values": {"type": "array", "items": _num, "minItems": 1},
        "proportions": {"type": "array", "items": _num, "minItems": 1},
        "gammas": {"type": "array"},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": "power_law"}}}, "then": {"required": ["mu"]}},
        {"if": {"properties": {"kind": {"const": "two_block"}}}, "then": {"required": ["values", "proportions"]}},
        {"if": {"properties": {"kind": {"const": "explicit"}}}, "then": {"required": ["gammas"]}},
    ],
}

_E_GRID = {
    "oneOf": [
        {"type": "array", "items": _num, "minItems": 1},
        {
            "type": "object",
            "required": ["start", "stop", "num"],
            "properties": {"start": _num, "stop": _num, "num": _posint},
            "additionalProperties": False,
        },
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "N": {"type": "integer", "minimum": 2, "maximum": 8192},
        "kappa": {"type": "number", "exclusiveMinimum": 0, "maximum": 1,
                  "description": "real in (0,1]"},
        "profile": {"oneOf": [_PROFILE_ITEM, {"type": "array", "items": _PROFILE_ITEM, "minItems": 1}]},
        "flatness_bound": _pos,
        "model": {"enum": ["random_sign", "centered", "goe"]},
        "seed": _seed,
        "threads": _posint,
        "output": {"type": "string"},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
                "max_iter": _posint,
                "damping_floor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "method": {"enum": ["newton", "picard"]},
                "continuation": {"type": "boolean"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"E": _E_GRID, "eta": {"type": "array", "items": _pos, "minItems": 1}},
        },
        "qve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 1, "maximum": 2**16},
                "kernel_csv": {"type": "string"},
            },
        },
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"matrix": {"type": "string"}, "pair_budget": _posint},
        },
        "plan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "E_interval": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "n_E": _posint,
                "eta": {"type": "array", "items": _pos},
                "eta_exponents": {"type": "array", "items": {"type": "number", "exclusiveMaximum": 0}},
                "samples": _posint,
                "pair_budget": _posint,
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "bulk_threshold": _pos,
                "quantile": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_ratio": _pos,
                "diagnostics": {"type": "boolean"},
            },
        },
        "universality": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": _posint,
                "goe_samples": _posint,
                "goe_seed": _seed,
                "bulk_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "ks_max": _pos,
                "control_min": _pos,
            },
        },
        "degrees": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": _posint,
                "cutoff_quantile": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "n_boot": _posint,
                "beta_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            },
        },
    },
}

DEFAULTS = {
    "N": 1000,
    "kappa": 0.5,
    "profile": {"kind": "constant", "value": 1.0},
    "flatness_bound": 100.0,
    "model": "random_sign",
    "seed": 0,
    "threads": 1,
    "output": "out",
    "solver": {"tol": 1e-12, "max_iter": 10_000, "damping_floor": 1.0 / 64, "method": "newton",
               "continuation": True},
    "grid": {"E": {"start": -2.5, "stop": 2.5, "num": 11}, "eta": [0.01]},
    "qve": {},
    "stats": {"pair_budget": 100_000},
    "plan": {"E_interval": [-0.5, 0.5], "n_E": 5, "eta": [0.1], "samples": 10, "pair_budget": 100_000,
             "delta": 0.1, "bulk_threshold": 0.05, "quantile": 0.95, "max_ratio": 10.0, "diagnostics": False},
    "universality": {"samples": 50, "goe_samples": 50, "goe_seed": 1, "bulk_fraction": 1.0 / 3.0,
                     "ks_max": 0.02, "control_min": 0.1},
    "degrees": {"samples": 20, "cutoff_quantile": 0.8, "n_boot": 200},
}


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration with defaults filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return canonical_json(self.data)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @property
    def solver_options(self):
        from ._iteration import SolverOptions

        return SolverOptions(**self.data["solver"])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _path(err) -> str:
    parts = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    return "/".join(str(p) for p in parts) or "<root>"


def _message(err) -> str:
    desc = err.schema.get("description") if isinstance(err.schema, dict) else None
    return f"{err.message} ({desc})" if desc else err.message


def validate(data) -> None:
    """Raise SchemaViolation listing every problem in ``data``."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    violations = [(_path(e), _message(e)) for e in errors]
    if isinstance(data, dict):
        interval = data.get("plan", {}).get("E_interval")
        if isinstance(interval, list) and len(interval) == 2 and all(isinstance(x, (int, float)) for x in interval):
            if interval[0] > interval[1]:
                violations.append(("plan/E_interval", "lower end exceeds upper end"))
    if violations:
        raise SchemaViolation(violations)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None) -> dict:
    """Nested override dict from ``CLSPEC_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        if keys and keys[0] == "n":
            keys[0] = "N"
        if keys[-1] == "e_interval":
            keys[-1] = "E_interval"
        elif keys[-1] == "n_e":
            keys[-1] = "n_E"
        elif keys[-1] == "e" and len(keys) > 1 and keys[0] == "grid":
            keys[-1] = "E"
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def load_document(text: str) -> tuple[dict, str | None]:
    """Parse config text; a manifest yields its embedded config and subcommand."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation([("<root>", f"invalid JSON: {exc}")]) from exc
    if isinstance(doc, dict) and "config_hash" in doc and "config" in doc:
        return doc["config"], doc.get("subcommand")
    return doc, None


def parse_config(text: str = "{}", environ=None, flags: dict | None = None) -> RunConfig:
    """Validate ``text`` merged with environment and flag overrides, then fill defaults."""
    doc, _ = load_document(text)
    if not isinstance(doc, dict):
        raise SchemaViolation([("<root>", "config must be a JSON object")])
    layered = merge(merge(doc, env_overrides(environ if environ is not None else {})), flags or {})
    validate(layered)
    return RunConfig(merge(DEFAULTS, layered))
