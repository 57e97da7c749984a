"""Experiment files: JSON documents describing a simulation (plus optional
comparison lists), validated against a versioned schema before any run."""

from __future__ import annotations

import json
from typing import Any, Optional

import jsonschema

from .engine import ClientSpec, DataSpec, DelaySpec, SimConfig
from .model import TaskSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_delay = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["uniform", "constant", "exponential"]},
        "lo": {"type": "number", "exclusiveMinimum": 0},
        "hi": {"type": "number", "exclusiveMinimum": 0},
        "value": {"type": "number", "exclusiveMinimum": 0},
        "mean": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_client_common = {
    "delay": _delay,
    "Q": {"type": "integer", "minimum": 1},
    "eta_l": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": {"type": ["integer", "null"], "minimum": 1},
    "group": {"type": "string"},
}

SCHEMA: dict = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "buffer_size": {"type": "integer", "minimum": 1},
        "strategy": {"enum": ["fedstaleweight", "fedavg"]},
        "eta_g": {"type": "number", "exclusiveMinimum": 0},
        "total_aggregations": {"type": "integer", "minimum": 1},
        "master_seed": {"type": "integer", "minimum": 0},
        "weight_form": {"enum": ["eq8", "alg1"]},
        "estimator": {"enum": ["mean", "ema"]},
        "ema_beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "record_grad_norms": {"type": "boolean"},
        "init_scale": {"type": "number", "minimum": 0},
        "acc_target": {"type": "number", "minimum": 0, "maximum": 1},
        "task": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["softmax_linear", "mlp_one_hidden", "quadratic"]},
                "feature_dim": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 1},
                "hidden_dim": {"type": "integer", "minimum": 0},
                "l2_coefficient": {"type": "number", "minimum": 0},
            },
            "required": ["kind", "feature_dim"],
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["blobs", "quadratic", "none"]},
                "num_classes": {"type": "integer", "minimum": 1},
                "examples_per_class": {"type": "integer", "minimum": 1},
                "class_separation": {"type": "number", "exclusiveMinimum": 0},
                "fast_labels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "slow_labels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "holdout_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "optimum_scale": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "clients": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "agent_id": {"type": "integer", "minimum": 0},
                    "shard": {"type": ["integer", "null"], "minimum": 0},
                    "rng_seed": {"type": ["integer", "null"], "minimum": 0},
                    **_client_common,
                },
                "required": ["agent_id", "delay"],
                "additionalProperties": False,
            },
        },
        "client_groups": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {"count": {"type": "integer", "minimum": 1}, **_client_common},
                "required": ["count", "delay"],
                "additionalProperties": False,
            },
        },
        "compare": {
            "type": "object",
            "properties": {
                "strategies": {"type": "array", "items": {"enum": ["fedstaleweight", "fedavg"]}},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["schema_version", "buffer_size", "total_aggregations", "task", "data"],
    "oneOf": [{"required": ["clients"]}, {"required": ["client_groups"]}],
    "additionalProperties": False,
}


def validate(doc: Any) -> None:
    if isinstance(doc, dict) and "schema_version" in doc and doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {doc['schema_version']!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None


def _clients(doc: dict) -> list:
    if "clients" in doc:
        out = []
        for c in doc["clients"]:
            c = dict(c)
            c["delay"] = DelaySpec(**c["delay"])
            out.append(ClientSpec(**c))
        return out
    out, agent = [], 0
    for g in doc["client_groups"]:
        g = dict(g)
        count = g.pop("count")
        delay = DelaySpec(**g.pop("delay"))
        for _ in range(count):
            out.append(ClientSpec(agent_id=agent, delay=delay, **g))
            agent += 1
    return out


def to_sim_config(doc: dict, seed: Optional[int] = None) -> SimConfig:
    """Build a :class:`SimConfig`; ``seed`` overrides ``master_seed``."""
    validate(doc)
    keys = {"buffer_size", "strategy", "eta_g", "total_aggregations", "master_seed", "weight_form",
            "estimator", "ema_beta", "record_grad_norms", "init_scale"}
    kw = {k: doc[k] for k in keys if k in doc}
    if seed is not None:
        kw["master_seed"] = int(seed)
    try:
        return SimConfig(
            clients=tuple(_clients(doc)),
            task=TaskSpec(**doc["task"]),
            data=DataSpec(**doc["data"]),
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolved_document(config: SimConfig, doc: Optional[dict] = None) -> dict:
    """Fully expanded experiment file that reproduces ``config`` exactly."""
    d = config.to_dict()
    d.pop("evaluate", None)
    out = {"schema_version": SCHEMA_VERSION, **d}
    for c in out["clients"]:
        for k in ("shard", "rng_seed"):
            if c[k] is None:
                del c[k]
    if doc is not None:
        for k in ("acc_target", "compare"):
            if k in doc:
                out[k] = doc[k]
    return out


def load(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    validate(doc)
    return doc
