"""Run configuration and the key-value config file format.

Config files are plain text, one `key = value` per line, `#` comments.
Booleans accept true/false/yes/no/1/0; tuples are comma-separated. Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .errors import ConfigError
from .synthgen import SceneConfig


def parse_kv_file(path) -> dict:
    data = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in data:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            data[key] = value
    return data


def _coerce(value, target_type, key):
    if isinstance(value, target_type) and not isinstance(value, str):
        return value
    text = str(value).strip()
    try:
        if target_type is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc
    raise ConfigError(f"config key {key!r}: unsupported type {target_type}")


def dataclass_from_dict(cls, data: dict, source: str = "<config>"):
    """Build a config dataclass from a string dict; unknown keys rejected."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown config keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        if f.type in ("tuple[str, ...]", "tuple"):  # shape vocabulary
            parts = [p.strip() for p in str(value).split(",") if p.strip()]
            kwargs[key] = tuple(parts)
        elif f.type in ("int", int):
            kwargs[key] = _coerce(value, int, key)
        elif f.type in ("float", float):
            kwargs[key] = _coerce(value, float, key)
        elif f.type in ("bool", bool):
            kwargs[key] = _coerce(value, bool, key)
        else:
            kwargs[key] = _coerce(value, str, key)
    return cls(**kwargs)


def scene_config_from_file(path) -> SceneConfig:
    cfg = dataclass_from_dict(SceneConfig, parse_kv_file(path), str(path))
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs; see README for the key reference."""

    train_data: str = ""
    val_data: str = ""
    out_dir: str = "runs/default"
    # model
    d_max: int = 64
    channels: int = 64
    groups: int = 8
    blocks: int = 6
    intra_blocks: int = 2
    cross_layers: int = 4
    cross_heads: int = 4
    sinkhorn_iters: int = 100
    # losses
    lambda_intra: float = 100.0
    lambda_cross_soft: float = 0.5
    lambda_cross_hard: float = 0.5
    enable_intra: bool = True
    enable_cross_soft: bool = True
    enable_cross_hard: bool = True
    kl_reverse: bool = False
    aux_weight: float = 0.3
    # teacher
    teacher: str = "oracle"
    teacher_records: str = ""
    tau: float = 1.0
    nms_radius: int = 4
    nms_threshold: float = 0.015
    max_points: int = 512
    match_eps: float = 1.0
    # optimization
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 0

    def validate(self) -> None:
        if not self.train_data:
            raise ConfigError("train_data is required")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.d_max % 4 or self.d_max < 4:
            raise ConfigError("d_max must be a positive multiple of 4")
        if self.channels % self.groups:
            raise ConfigError("channels must be divisible by groups")
        if self.channels % self.cross_heads:
            raise ConfigError("channels must be divisible by cross_heads")
        if self.intra_blocks < 1:
            raise ConfigError("intra_blocks must be >= 1")
        if self.cross_layers < 0:
            raise ConfigError("cross_layers must be >= 0")
        if self.teacher not in ("oracle", "harris", "records"):
            raise ConfigError(f"teacher must be oracle|harris|records, got {self.teacher!r}")
        if self.teacher == "records" and not self.teacher_records:
            raise ConfigError("teacher=records requires teacher_records")
        for name in ("lambda_intra", "lambda_cross_soft", "lambda_cross_hard",
                     "tau", "match_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def run_config_from_file(path) -> RunConfig:
    cfg = dataclass_from_dict(RunConfig, parse_kv_file(path), str(path))
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
