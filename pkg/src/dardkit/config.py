"""Strict-schema run configuration.

One YAML file drives every CLI command.  Unknown keys are rejected (a
misspelled hyperparameter should fail loudly, not silently fall back to a
default), every omitted key takes a documented default, and the fully
resolved mapping is echoed into the run manifest so results stay diffable.
The schema is published in docs/config_schema.md.
"""

from __future__ import annotations

import copy
import json
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig
from .data import DatasetSpec, FIXTURE_SPREAD
from .distill import DistillConfig
from .errors import ConfigError
from .models import SgdConfig


@dataclass(frozen=True)
class Key:
    """Schema leaf: expected type, default value, optional choice set."""

    type: type | tuple
    default: Any
    choices: tuple | None = None
    nullable: bool = False


_ATTACK_SCHEMA = {
    "kind": Key(str, "pgd", choices=("fgsm", "bim", "pgd", "tpgd", "dpgd")),
    "epsilon": Key((int, float), 8 / 255),
    "step_size": Key((int, float), 2 / 255),
    "iterations": Key(int, 20),
    "random_start": Key(bool, None, nullable=True),
    "target_rule": Key(str, "least-likely", choices=("least-likely", "fixed-class")),
    "target_class": Key(int, None, nullable=True),
    "dpgd_loss": Key(str, "dice", choices=("dice", "ce")),
    "dice_smooth": Key((int, float), 1.0),
}

SCHEMA: dict[str, Any] = {
    "seed": Key(int, 0),
    "output_dir": Key(str, "runs/latest"),
    "dataset": {
        "kind": Key(
            str, "synthetic-blobs", choices=("synthetic-blobs", "cifar10", "cifar100")
        ),
        "path": Key(str, None, nullable=True),
        "test_path": Key(str, None, nullable=True),
        "seed": Key(int, 0),
        "num_classes": Key(int, 10),
        "dim": Key(int, 32),
        "n_per_class": Key(int, 200),
        "spread": Key((int, float), FIXTURE_SPREAD),
        "scale": Key((int, float), 1.0),
    },
    "model": {
        "architecture": Key(str, "mlp-2x64"),
        "checkpoint": Key(str, None, nullable=True),
        "teacher_architecture": Key(str, "mlp-2x64"),
        "teacher_checkpoint": Key(str, None, nullable=True),
    },
    "attack": dict(_ATTACK_SCHEMA),
    "distill": {
        "strategy": Key(
            str,
            "dard",
            choices=("natural", "sat", "ard", "dard", "tdard", "pgdard", "onlyadv_ard"),
        ),
        "teacher_recipe": Key(str, "sat", choices=("natural", "sat")),
        "alpha_kd": Key((int, float), 0.9),
        "tau": Key((int, float), 1.0),
        "mix_beta": Key((int, float), 0.5),
        "epochs": Key(int, 30),
        "batch_size": Key(int, 128),
        "kl_orientation": Key(
            str, "teacher-student", choices=("teacher-student", "student-teacher")
        ),
        "dice_smooth": Key((int, float), 1.0),
        "sgd": {
            "learning_rate": Key((int, float), 0.1),
            "momentum": Key((int, float), 0.9),
            "weight_decay": Key((int, float), 5e-4),
        },
        # training-time attack budget; deliberately separate from the
        # evaluation `attack` section so eval changes never invalidate
        # training stages
        "attack": {
            **_ATTACK_SCHEMA,
            "kind": Key(str, None, nullable=True, choices=("fgsm", "bim", "pgd", "tpgd", "dpgd")),
        },
    },
    "eval": {
        "attacks": Key(list, ["fgsm", "pgd", "tpgd", "bim"]),
        "batch_size": Key(int, 256),
        "max_samples": Key(int, None, nullable=True),
    },
    "attack_dump": Key(bool, False),
}


def _validate(user: Any, schema: Any, prefix: str) -> Any:
    if isinstance(schema, dict):
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
        for key in user:
            if key not in schema:
                dotted = f"{prefix}{key}"
                raise ConfigError(f"unknown config key: {dotted}")
        return {
            key: _validate(user.get(key), sub, f"{prefix}{key}.")
            for key, sub in schema.items()
        }
    assert isinstance(schema, Key)
    dotted = prefix.rstrip(".")
    if user is None:
        value = copy.deepcopy(schema.default)
    else:
        value = user
    if value is None:
        if schema.nullable or schema.default is None:
            return None
        raise ConfigError(f"config key {dotted} may not be null")
    if schema.type is not list and isinstance(value, bool) and schema.type != bool:
        raise ConfigError(f"config key {dotted} has wrong type (bool)")
    if not isinstance(value, schema.type):
        raise ConfigError(
            f"config key {dotted} expects {schema.type}, got {type(value).__name__}"
        )
    if schema.choices is not None and value not in schema.choices:
        raise ConfigError(
            f"config key {dotted} must be one of {list(schema.choices)}, got {value!r}"
        )
    return value


def resolve_config(user: dict | None) -> dict:
    """Validate a raw mapping against the schema and fill every default."""
    return _validate(user or {}, SCHEMA, "")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` entries on top of a raw config mapping."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value: {item!r}")
        path, _, literal = item.partition("=")
        value = yaml.safe_load(literal)
        node = raw
        parts = path.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-mapping")
        node[parts[-1]] = value
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Read, override, validate; returns the fully resolved mapping."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        raw = loaded
    if overrides:
        raw = apply_overrides(raw, overrides)
    return resolve_config(raw)


def config_digest(resolved: dict) -> str:
    """Stable hash of a resolved config mapping."""
    blob = json.dumps(resolved, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- resolved mapping -> domain objects ---------------------------------------


def dataset_spec(resolved: dict) -> DatasetSpec:
    d = resolved["dataset"]
    return DatasetSpec(
        kind=d["kind"],
        path=d["path"],
        seed=d["seed"],
        num_classes=d["num_classes"],
        dim=d["dim"],
        n_per_class=d["n_per_class"],
        spread=float(d["spread"]),
        scale=float(d["scale"]),
    )


def attack_config(section: dict, kind: str | None = None) -> AttackConfig:
    return AttackConfig(
        kind=kind or section["kind"],
        epsilon=float(section["epsilon"]),
        step_size=float(section["step_size"]),
        iterations=section["iterations"],
        random_start=section["random_start"],
        target_rule=section["target_rule"],
        target_class=section["target_class"],
        dpgd_loss=section["dpgd_loss"],
        dice_smooth=float(section["dice_smooth"]),
    )


_FORCED_INNER_KIND = {"sat": "pgd", "ard": "pgd", "pgdard": "pgd"}
_DEFAULT_INNER_KIND = {"dard": "dpgd", "tdard": "dpgd", "onlyadv_ard": "dpgd"}


def distill_config(resolved: dict, strategy: str | None = None) -> DistillConfig:
    d = resolved["distill"]
    sgd = SgdConfig(
        learning_rate=float(d["sgd"]["learning_rate"]),
        momentum=float(d["sgd"]["momentum"]),
        weight_decay=float(d["sgd"]["weight_decay"]),
    )
    name = strategy or d["strategy"]
    inner = d["attack"]
    if name == "natural":
        attack = None
    else:
        # a null kind means "the strategy's default"; budget keys still apply
        kind = (
            _FORCED_INNER_KIND.get(name)
            or inner["kind"]
            or _DEFAULT_INNER_KIND.get(name, "pgd")
        )
        attack = attack_config(inner, kind=kind)
    return DistillConfig(
        strategy=name,
        alpha_kd=float(d["alpha_kd"]),
        tau=float(d["tau"]),
        mix_beta=float(d["mix_beta"]),
        attack=attack,
        epochs=d["epochs"],
        batch_size=d["batch_size"],
        seed=resolved["seed"],
        sgd=sgd,
        kl_orientation=d["kl_orientation"],
        dice_smooth=float(d["dice_smooth"]),
    )
