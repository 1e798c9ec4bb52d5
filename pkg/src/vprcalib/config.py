"""Pipeline configuration: YAML file, schema validation, defaults, seeds.

A config file only needs the keys it changes; everything else comes from
:data:`DEFAULTS`.  The single ``seed`` fans out as follows:

* tuning world: ``seed``
* held-out world ``k``: ``seed + 1 + k``
* descriptor domain (shared by all worlds): ``simulator.domain_seed`` if
  given, else ``seed``
* RANSAC and training shuffles: ``seed``
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import yaml

from .errors import InvalidConfig, IoFailure
from .evaluation import EvalConfig
from .mining import MiningConfig
from .optimizer import GncConfig, LMConfig
from .registration import RansacConfig, RegistrationConfig
from .simulator import WorldConfig
from .training import TrainConfig

STAGES = ("simulate", "mine", "optimize", "train", "eval")
SEQUENCE_FILES = ("descriptors", "observations", "odometry", "ground_truth")

DEFAULTS = {
    "seed": 0,
    "stages": {name: True for name in STAGES},
    "simulator": {},
    "tuning_aliasing_pairs": 2,
    "heldout_sequences": 1,
    "inputs": {"tuning": None, "heldout": []},
    "mining": {
        "window": 10,
        "k_max": 50,
        "max_negatives": 10,
        "normalize": False,
        "min_correspondences": 6,
        "ransac_iterations": 100,
        "inlier_threshold": 0.05,
    },
    "optimizer": {"chi2_quantile": 0.99, "mu_growth": 1.4, "max_iters": 100},
    "training": {
        "margin": 0.25,
        "learning_rate": 1e-3,
        "epochs": 30,
        "grad_clip_norm": 1.0,
        "cosine_decay": True,
    },
    "evaluation": {"thresholds": 50},
}

_JSON_TYPES = {"int": "integer", "float": "number", "str": "string", "bool": "boolean"}


def _world_schema():
    props = {}
    for f in fields(WorldConfig):
        if f.name == "seed":
            continue
        props[f.name] = {"type": _JSON_TYPES[str(f.type)]}
    props["trajectory"]["enum"] = ["loop", "figure-eight", "grid"]
    return {"type": "object", "additionalProperties": False, "properties": props}


def _sequence_schema(required):
    return {
        "type": "object",
        "additionalProperties": False,
        "required": list(required),
        "properties": {k: {"type": "string"} for k in SEQUENCE_FILES},
    }


_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": list(DEFAULTS),
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "stages": {
            "type": "object",
            "additionalProperties": False,
            "required": list(STAGES),
            "properties": {name: {"type": "boolean"} for name in STAGES},
        },
        "simulator": _world_schema(),
        "tuning_aliasing_pairs": {"type": "integer", "minimum": 0},
        "heldout_sequences": {"type": "integer", "minimum": 0},
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tuning": {"oneOf": [{"type": "null"}, _sequence_schema(("descriptors", "observations", "odometry"))]},
                "heldout": {"type": "array", "items": _sequence_schema(SEQUENCE_FILES)},
            },
        },
        "mining": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window": {"type": "integer", "minimum": 0},
                "k_max": _COUNT,
                "max_negatives": _COUNT,
                "normalize": {"type": "boolean"},
                "min_correspondences": {"type": "integer", "minimum": 3},
                "ransac_iterations": _COUNT,
                "inlier_threshold": _POSITIVE,
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "chi2_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mu_growth": {"type": "number", "exclusiveMinimum": 1},
                "max_iters": _COUNT,
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "margin": {"type": "number", "minimum": 0},
                "learning_rate": _POSITIVE,
                "epochs": {"type": "integer", "minimum": 0},
                "grad_clip_norm": {"oneOf": [{"type": "null"}, _POSITIVE]},
                "cosine_decay": {"type": "boolean"},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"thresholds": {"type": "integer", "minimum": 2}},
        },
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(overrides=None) -> dict:
    """Defaults merged with ``overrides``, then schema-checked."""
    overrides = overrides or {}
    if not isinstance(overrides, dict):
        raise InvalidConfig("config must be a mapping")
    data = _merge(DEFAULTS, overrides)
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidConfig(f"{where}: {exc.message}") from exc
    if not data["stages"]["simulate"] and data["inputs"]["tuning"] is None:
        raise InvalidConfig("inputs/tuning is required when the simulate stage is off")
    try:
        WorldConfig(**data["simulator"]).validate()
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    return data


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return resolve(data)


@dataclass
class StageConfigs:
    """Module configs built from a resolved pipeline config."""

    tuning_world: WorldConfig
    heldout_worlds: list
    mining: MiningConfig
    gnc: GncConfig
    training: TrainConfig
    evaluation: EvalConfig


def seeds(data) -> dict:
    seed = data["seed"]
    return {
        "tuning_world": seed,
        "heldout_worlds": [seed + 1 + k for k in range(data["heldout_sequences"])],
        "domain": data["simulator"].get("domain_seed", seed),
        "ransac": seed,
        "training": seed,
    }


def stage_configs(data) -> StageConfigs:
    s = seeds(data)
    world = {**data["simulator"], "domain_seed": s["domain"]}
    tuning = WorldConfig(**{**world, "seed": s["tuning_world"], "aliasing_pairs": data["tuning_aliasing_pairs"]})
    heldout = [WorldConfig(**{**world, "seed": k}) for k in s["heldout_worlds"]]

    m, o, t = data["mining"], data["optimizer"], data["training"]
    gnc = GncConfig(chi2_quantile=o["chi2_quantile"], mu_growth=o["mu_growth"], lm=LMConfig(max_iters=o["max_iters"]))
    registration = RegistrationConfig(
        min_correspondences=m["min_correspondences"],
        ransac=RansacConfig(iterations=m["ransac_iterations"], inlier_threshold=m["inlier_threshold"]),
    )
    mining = MiningConfig(
        window=m["window"],
        k_max=m["k_max"],
        max_negatives=m["max_negatives"],
        registration=registration,
        gnc=gnc,
        normalize=m["normalize"],
        seed=s["ransac"],
    )
    training = TrainConfig(
        margin=t["margin"],
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        grad_clip_norm=t["grad_clip_norm"],
        cosine_decay=t["cosine_decay"],
        seed=s["training"],
    )
    evaluation = EvalConfig(
        window=m["window"],
        revisit_radius=tuning.revisit_radius,
        n_thresholds=data["evaluation"]["thresholds"],
        registration=registration,
        gnc=gnc,
        seed=s["ransac"],
    )
    return StageConfigs(tuning, heldout, mining, gnc, training, evaluation)


def default_yaml() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
