"""Run configuration: one JSON document, validated against a published schema.

Precedence is flag > file > default. A run manifest is itself a valid
config source: its ``config`` member is the fully resolved document.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema

from .errors import ConfigError
from .trainer import TrainConfig

_TRAIN_PROPS = {
    "alpha": {"type": "number", "minimum": 0},
    "lam": {"type": "number", "minimum": 0, "maximum": 1},
    "temperature": {"type": "number", "exclusiveMinimum": 0},
    "gamma_threshold": {"type": "number", "exclusiveMinimum": 0},
    "iterations": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "partition": {"type": "string", "pattern": r"^(half|flop|param|half_split|all_flop|all_param|idx:[0-9, ]*)$"},
    "mode": {"enum": ["teacher", "student"]},
    "eval_interval": {"type": "integer", "minimum": 1},
    "normalize_costs": {"type": "boolean"},
    "cost_scale": {"type": "number", "exclusiveMinimum": 0},
    "optimizer": {"enum": ["adam"]},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "shrinkforge run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "spec": {"oneOf": [{"type": "string"}, {"type": "object"}]},
        "data": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "num_classes": {"type": "integer", "minimum": 2},
                        "n_per_class": {"type": "integer", "minimum": 1},
                        "test_per_class": {"type": "integer", "minimum": 1},
                        "size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                 "minItems": 3, "maxItems": 3},
                        "difficulty": {"type": "number", "minimum": 0, "maximum": 1},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
                    "properties": {
                        "kind": {"const": "idx"},
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "num_classes": {"type": "integer", "minimum": 2},
                        "checksums": {"type": "object"},
                    },
                },
            ]
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "teacher": {"type": ["string", "null"]},
        "prune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bn_batches": {"type": "integer", "minimum": 0},
                "probe_size": {"type": "integer", "minimum": 1},
            },
        },
        "out_dir": {"type": ["string", "null"]},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alphas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "partitions": {"type": "array", "items": _TRAIN_PROPS["partition"], "minItems": 1},
                "parallel": {"type": "integer", "minimum": 1},
            },
        },
    },
}

SYNTHETIC_DEFAULTS = {"kind": "synthetic", "num_classes": 4, "n_per_class": 500, "size": [3, 16, 16],
                      "difficulty": 0.3, "seed": 11}
PRUNE_DEFAULTS = {"bn_batches": 50, "probe_size": 1000}


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def validate(doc: Any) -> None:
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        # oneOf failures are vague; report the most specific nested cause
        while err.context:
            err = min(err.context, key=lambda e: (len(e.context or ()), -len(list(e.absolute_path))))
        raise ConfigError(f"{_field_path(err)}: {err.message}")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def is_manifest(doc) -> bool:
    return isinstance(doc, dict) and doc.get("tool") == "shrinkforge" and "config" in doc


def load(path) -> dict:
    """Read a config file or a run manifest and return a validated document."""
    doc = _read_json(Path(path))
    if is_manifest(doc):
        doc = doc["config"]
    validate(doc)
    return doc


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = _read_json(path)
    if not is_manifest(doc):
        raise ConfigError(f"{path}: not a run manifest")
    validate(doc["config"])
    return doc


def merge(base: Mapping, overrides: Optional[Mapping] = None) -> dict:
    """Deep-merge ``overrides`` into a copy of ``base``; ``None`` values are ignored."""
    out = copy.deepcopy(dict(base))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(doc: Mapping, mode: str) -> dict:
    """Fill every default so the result alone reproduces the run."""
    validate(dict(doc))
    data = doc.get("data") or {"kind": "synthetic"}
    doc = merge({"spec": "tiny3", "train": {}, "teacher": None, "prune": dict(PRUNE_DEFAULTS)},
                {k: v for k, v in doc.items() if k != "data"})
    doc["data"] = merge(SYNTHETIC_DEFAULTS, data) if data["kind"] == "synthetic" else copy.deepcopy(data)
    doc["train"] = TrainConfig.from_dict(dict(doc["train"], mode=mode)).to_dict()
    doc.pop("out_dir", None)
    doc.pop("sweep", None)
    validate(doc)
    return doc
