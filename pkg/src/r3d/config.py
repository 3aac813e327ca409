"""JSON experiment configs with strict validation.

A config file is a flat JSON object mirroring TrainConfig (with an optional
nested "augment" object) or PretrainConfig. Unknown keys are rejected up
front so a typo cannot silently fall back to a default. CLI flags override
file values.
"""

from __future__ import annotations

import json
from dataclasses import fields

from .pointcloud import AugmentConfig
from .policy import TrainConfig
from .pretrain import PretrainConfig

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
AUGMENT_KEYS = {f.name for f in fields(AugmentConfig)}
PRETRAIN_KEYS = {f.name for f in fields(PretrainConfig)}


class ConfigError(ValueError):
    """Bad configuration input: malformed file, unknown key, invalid value."""


def load_json_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _merge(doc: dict | None, overrides: dict | None, known: set, kind: str) -> dict:
    merged = dict(doc or {})
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown {kind} config keys: {sorted(unknown)}")
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    return merged


def build_train_config(doc: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    merged = _merge(doc, overrides, TRAIN_KEYS, "train")
    aug = merged.get("augment")
    if aug is not None:
        if not isinstance(aug, dict):
            raise ConfigError("augment must be a JSON object")
        bad = set(aug) - AUGMENT_KEYS
        if bad:
            raise ConfigError(f"unknown augment config keys: {sorted(bad)}")
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e


def build_pretrain_config(doc: dict | None = None, overrides: dict | None = None) -> PretrainConfig:
    merged = _merge(doc, overrides, PRETRAIN_KEYS, "pretrain")
    try:
        return PretrainConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid pretrain config: {e}") from e
