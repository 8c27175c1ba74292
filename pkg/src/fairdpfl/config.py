"""Experiment configuration: JSON in, validated dataclasses out.

Unknown keys are rejected so a run directory's ``config.json`` always
describes exactly what was executed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n: int = 10_000
    d: int = 6
    group_mix: float = 0.5
    label_rates: list = field(default_factory=lambda: [0.3, 0.7])
    label_shift: float = 1.0
    group_shift: float = 1.0
    label_dims: int = 2
    group_dims: int = 2
    noise: float = 1.0
    seed: int = 0


@dataclass
class CsvConfig:
    path: str = ""
    features: list = field(default_factory=list)
    label: str = "label"
    sensitive: str = "sensitive"


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "csv"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    csv: CsvConfig = field(default_factory=CsvConfig)


@dataclass
class PartitionConfig:
    n_clients: int = 20
    unfair_fraction: float = 0.5
    zeta: float = 0.5
    target_group: int = 0
    target_label: int = 1
    mode: str = "reduce"
    seed: int = 0


@dataclass
class ClientsConfig:
    n_test: int = 5
    n_val: int = 0
    split_seed: int = 0
    merge_validation: bool = False  # train on train+val clients (final retrain)


@dataclass
class FLConfig:
    rounds: int = 30
    client_fraction: float = 0.3
    epochs: int = 1
    lr: float = 0.1
    sampling_rate: float = 0.1


@dataclass
class FairnessConfig:
    mode: str = "none"  # "none" | "fixed" | "tunable"
    lam: float = 0.0
    target: float = 0.1
    rho: float = 0.1
    momentum: float = 0.0


@dataclass
class PrivacyConfig:
    enabled: bool = False
    epsilon: float = 5.0
    delta: float | None = None  # None -> max_k 1/n_k over training clients
    clip_bound: float = 1.0
    eps_split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    delta_split: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])


@dataclass
class EvalConfig:
    noisy_test_stats: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.data.source in ("synthetic", "csv"), "data.source must be 'synthetic' or 'csv'"),
            (self.data.source != "csv" or bool(self.data.csv.path), "data.csv.path is required for csv input"),
            (self.partition.mode in ("reduce", "remove_combo", "remove_sensitive"), "partition.mode is invalid"),
            (self.partition.n_clients >= 2, "partition.n_clients must be >= 2"),
            (0 <= self.partition.unfair_fraction <= 1, "partition.unfair_fraction must be in [0, 1]"),
            (0 <= self.partition.zeta <= 1, "partition.zeta must be in [0, 1]"),
            (self.clients.n_test + self.clients.n_val < self.partition.n_clients, "no training clients left"),
            (self.fl.rounds >= 1, "fl.rounds must be >= 1"),
            (0 < self.fl.client_fraction <= 1, "fl.client_fraction must be in (0, 1]"),
            (self.fl.epochs >= 1, "fl.epochs must be >= 1"),
            (self.fl.lr > 0, "fl.lr must be > 0"),
            (0 < self.fl.sampling_rate <= 1, "fl.sampling_rate must be in (0, 1]"),
            (self.fairness.mode in ("none", "fixed", "tunable"), "fairness.mode is invalid"),
            (0 <= self.fairness.lam <= 1, "fairness.lam must be in [0, 1]"),
            (0 <= self.fairness.target <= 1, "fairness.target must be in [0, 1]"),
            (self.fairness.rho > 0, "fairness.rho must be > 0"),
            (self.fairness.momentum >= 0, "fairness.momentum must be >= 0"),
            (self.privacy.epsilon > 0, "privacy.epsilon must be > 0"),
            (self.privacy.delta is None or 0 < self.privacy.delta < 1, "privacy.delta must be in (0, 1)"),
            (self.privacy.clip_bound > 0, "privacy.clip_bound must be > 0"),
            (len(self.privacy.eps_split) == 3 and abs(sum(self.privacy.eps_split) - 1) < 1e-9,
             "privacy.eps_split needs 3 shares summing to 1"),
            (len(self.privacy.delta_split) == 3 and abs(sum(self.privacy.delta_split) - 1) < 1e-9,
             "privacy.delta_split needs 3 shares summing to 1"),
            (len(self.seeds) >= 1, "seeds must be non-empty"),
            (all(isinstance(s, int) and s >= 0 for s in self.seeds), "seeds must be non-negative integers"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        else:
            kwargs[name] = _coerce(hint, value, path)
    return cls(**kwargs)


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{path}: null not allowed")
    base = next((a for a in args if a is not type(None)), hint) if args and origin is not list else hint
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if base is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return list(value)
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def set_path(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one nested field replaced, e.g. ``"fl.lr"``."""
    raw = copy.deepcopy(cfg.to_dict())
    node = raw
    keys = dotted.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config path {dotted!r}")
    node[keys[-1]] = value
    return config_from_dict(raw)
