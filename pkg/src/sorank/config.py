"""Run configuration: one JSON document covering every knob of a run.

Unknown keys are rejected so typos fail loudly. The config hash (used to
bind checkpoints to the settings that produced them) covers everything
except the output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .scenes import GenParams
from .sor_branch import EncoderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scene: GenParams = field(default_factory=GenParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    metric_iou_threshold: float = 0.5
    object_threshold: float = 0.5
    seed: int = 0
    out_dir: str = "runs/default"


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def _from_dict(cls, doc, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(
            f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        if f.type in ("GenParams", "TrainConfig", "ModelConfig",
                      "EncoderConfig"):
            target = {"GenParams": GenParams, "TrainConfig": TrainConfig,
                      "ModelConfig": ModelConfig,
                      "EncoderConfig": EncoderConfig}[f.type]
            kwargs[name] = _from_dict(target, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def to_json(cfg: RunConfig) -> str:
    return json.dumps(_to_dict(cfg), sort_keys=True, indent=1)


def from_json(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}") from e
    return _from_dict(RunConfig, doc)


def load(path) -> RunConfig:
    with open(path) as f:
        return from_json(f.read())


def config_hash(cfg: RunConfig) -> bytes:
    doc = _to_dict(cfg)
    doc.pop("out_dir", None)
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()).digest()
