"""Experiment configuration: JSON schema, validation and digests.

A config is one self-describing JSON document.  The only environment
override is ``SCALIMIT_SEED``, which replaces the ``seed`` field.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import jsonschema

from .errors import ConfigError

EXPERIMENTS = ("figure1", "figure2", "bsde_convergence", "control_convergence", "moments", "verify")
SEED_ENV = "SCALIMIT_SEED"
SEED_MAX = 2**64 - 1

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

_TOY = {
    "type": "object",
    "properties": {
        "nu": _POS, "mu": _NONNEG, "sigma2": _POS, "gamma": _NONNEG,
        "x_tilde": _NONNEG, "x0": _POS, "T": _POS, "a_hi": _POS,
    },
    "required": ["nu", "mu", "sigma2", "gamma", "x_tilde", "x0", "T"],
    "additionalProperties": False,
}

_MODEL = {
    "type": "object",
    "properties": {"kind": {"const": "linear"}, "nu": _POS, "mu": _NONNEG, "sigma2": _POS},
    "required": ["nu", "mu", "sigma2"],
    "additionalProperties": False,
}

_REQUIRED = {
    "figure1": ["toy", "K_list"],
    "figure2": ["toy", "K_list", "n_paths", "t_eval"],
    "bsde_convergence": ["toy", "K_list", "n_paths"],
    "control_convergence": ["toy", "K_list", "n_paths"],
    "moments": ["model", "K_list", "n_paths", "beta", "T"],
    "verify": ["toy", "K", "n_paths"],
}

SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": SEED_MAX},
        "n_paths": {"type": "integer", "minimum": 1},
        "K_list": {"type": "array", "items": _POS, "minItems": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string", "minLength": 1},
        "toy": _TOY,
        "model": _MODEL,
        "dt": {
            "type": "object",
            "properties": {"euler": _POS, "lattice": _POS, "pde": _POS},
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {"nx": {"type": "integer", "minimum": 3}, "x_max": _POS},
            "additionalProperties": False,
        },
        "bsde_K_max": _NONNEG,
        "mc_K_max": _NONNEG,
        "t_eval": _POS,
        "beta": {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2},
        "T": _POS,
        "x0": _POS,
        "K": _POS,
        "mode": {"enum": ["discrete", "continuous", "both"]},
        "window": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "description": {"type": "string"},
    },
    "required": ["experiment", "seed"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"experiment": {"const": e}}}, "then": {"required": r}}
        for e, r in _REQUIRED.items()
    ],
}


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(extra)
    return "/".join(parts) or "<root>"


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated config document plus resolved defaults."""

    raw: dict
    seed_override: Optional[int] = None
    defaults: dict = field(default_factory=dict, compare=False)

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        return self.seed_override if self.seed_override is not None else int(self.raw["seed"])

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def dt(self, key: str, default=None):
        return self.raw.get("dt", {}).get(key, default)

    @property
    def workers(self) -> int:
        return int(self.raw.get("workers", os.cpu_count() or 1))

    @property
    def output_dir(self) -> str:
        return self.raw.get("output_dir", os.path.join("results", self.experiment))

    def effective(self) -> dict:
        """The document actually run: raw fields with the seed resolved."""
        doc = dict(self.raw)
        doc["seed"] = self.seed
        return doc

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON of :meth:`effective` (``workers``/``output_dir`` excluded)."""
        doc = {k: v for k, v in self.effective().items() if k not in ("workers", "output_dir")}
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def validate(doc) -> None:
    """Raise :class:`ConfigError` with the field path of the first violation."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _path(err))
    ks = doc.get("K_list", [])
    for i in range(1, len(ks)):
        if not ks[i] > ks[i - 1]:
            raise ConfigError("K_list must be strictly ascending", f"K_list/{i}")
    if "window" in doc and not doc["window"][1] > doc["window"][0]:
        raise ConfigError("window must satisfy lo < hi", "window/1")
    toy = doc.get("toy")
    if doc.get("t_eval") is not None and toy and doc["t_eval"] > toy["T"]:
        raise ConfigError("t_eval must not exceed toy.T", "t_eval")


def _seed_from_env() -> Optional[int]:
    val = os.environ.get(SEED_ENV)
    if val is None or val == "":
        return None
    try:
        seed = int(val)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={val!r} is not an integer", SEED_ENV) from None
    if not 0 <= seed <= SEED_MAX:
        raise ConfigError(f"{SEED_ENV} must lie in [0, 2^64)", SEED_ENV)
    return seed


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    """Read, validate and wrap a config file; ``seed`` beats ``SCALIMIT_SEED`` beats the file."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(doc, seed)


def from_dict(doc, seed: Optional[int] = None) -> ExperimentConfig:
    validate(doc)
    if seed is not None and not 0 <= seed <= SEED_MAX:
        raise ConfigError("seed must lie in [0, 2^64)", "--seed")
    override = seed if seed is not None else _seed_from_env()
    return ExperimentConfig(doc, override)
