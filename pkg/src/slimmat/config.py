"""Experiment configuration (schema ``slimmat/v1``)."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .losses import KDMethod, LossConfigError

CONFIG_SCHEMA = "slimmat/v1"
DEFAULT_ETA = ("enc1_relu", "enc2_relu", "enc3_relu", "enc4_relu")


class ConfigError(ValueError):
    """Schema violation; ``keys`` lists the offending entries."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class StageConfig:
    seed: int = 0
    width: float = 1.0
    ratio: float = 0.5
    # lambda1..lambda4; lambda4 = None picks the per-method default per site
    lambdas: tuple = (1.0, 0.5, 1e-4, None)
    # w1..w3; w3 = None as above
    weights: tuple = (1.0, 0.5, None)
    kd: KDMethod = field(default_factory=KDMethod)
    # training-stage KD method; None reuses ``kd``
    train_kd: KDMethod | None = None
    eta: tuple = DEFAULT_ETA
    strict_eta: bool = True
    teacher_epochs: int = 30
    prune_epochs: int = 15
    train_epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    min_keep_fraction: float = 0.1
    n_train: int = 200
    n_test: int = 20
    size: int = 64
    data_seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(self.lambdas)
        self.weights = tuple(self.weights)
        self.eta = tuple(self.eta)
        bad = []
        if not 0 <= self.ratio < 1:
            bad.append("ratio")
        if len(self.lambdas) != 4 or any(v is not None and v < 0 for v in self.lambdas):
            bad.append("lambdas")
        if len(self.weights) != 3 or any(v is not None and v < 0 for v in self.weights):
            bad.append("weights")
        for name in ("teacher_epochs", "prune_epochs", "train_epochs"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if not 0 < self.width <= 4:
            bad.append("width")
        if bad:
            raise ConfigError(f"invalid values for {', '.join(bad)}", bad)

    @property
    def training_kd(self) -> KDMethod:
        return self.train_kd or self.kd

    def replace(self, **changes) -> "StageConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["weights"] = list(self.weights)
        d["eta"] = list(self.eta)
        for key in ("kd", "train_kd"):
            if d[key] is not None:
                d[key]["kinds"] = list(d[key]["kinds"])
        return {"schema": CONFIG_SCHEMA, **d}


_FIELDS = {f.name for f in dataclasses.fields(StageConfig)}
_KD_FIELDS = {f.name for f in dataclasses.fields(KDMethod)}


def _kd_from(d, key):
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ConfigError(f"{key} must be a mapping", [key])
    unknown = set(d) - _KD_FIELDS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}", [f"{key}.{k}" for k in sorted(unknown)])
    try:
        return KDMethod(**{**d, "name": d.get("name", d.get("method", "SPKD"))})
    except LossConfigError as exc:
        raise ConfigError(str(exc), [f"{key}.name"]) from exc


def config_from_dict(d: dict) -> StageConfig:
    d = dict(d)
    schema = d.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA!r}, got {schema!r}", ["schema"])
    # dotted ``kd.method`` style keys are accepted as well
    for key in [k for k in d if "." in k]:
        head, tail = key.split(".", 1)
        if tail == "method":
            tail = "name"
        d.setdefault(head, {})
        if isinstance(d[head], dict):
            d[head][tail] = d.pop(key)
    for kd_key in ("kd", "train_kd"):
        if kd_key in d and isinstance(d[kd_key], dict) and "method" in d[kd_key]:
            d[kd_key] = {**d[kd_key], "name": d[kd_key].pop("method")}
    unknown = set(d) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}", sorted(unknown))
    if "kd" in d:
        d["kd"] = _kd_from(d["kd"], "kd")
    if "train_kd" in d:
        d["train_kd"] = _kd_from(d["train_kd"], "train_kd")
    try:
        return StageConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> StageConfig:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return config_from_dict(doc)


def save_config(cfg: StageConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
