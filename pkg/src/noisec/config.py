"""Experiment configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import ATTACK_KINDS, AttackConfig
from .data import SyntheticSpec
from .pipeline import DETECTOR_KINDS

BASELINE_KINDS = ("MAGNET_L1", "MAGNET_JSD")
ALL_DETECTORS = DETECTOR_KINDS + BASELINE_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    test_path: str | None = None
    cifar: bool = False
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ClassifierConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] | None = None
    feature_dim: int = 256
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.0
    optimizer: str = "sgd"


@dataclass
class AutoencoderConfig:
    channels: tuple[int, ...] = (32, 64, 128)
    # None means a third of the input dimension
    bottleneck: int | None = None
    sigma: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"


@dataclass
class BackdoorConfig:
    target_class: int = 0
    poison_rate: float = 0.1
    trigger_size: int = 2
    corner: str = "bottom-right"


# desk-scale budgets; AttackConfig's own defaults are the CIFAR-10 reference values
DESK_ATTACKS = {
    "FGSM": {"eps": 0.03},
    "BIM": {"eps": 0.03, "alpha": 0.005, "iters": 10},
    "PGD": {"eps": 0.03, "alpha": 0.005, "iters": 10, "random_start": True},
    "CW": {"c": 1.0},
}


def _default_attacks() -> dict[str, AttackConfig]:
    return {k: AttackConfig(kind=k, **DESK_ATTACKS.get(k, {})) for k in ATTACK_KINDS}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    surrogate: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(channels=(8, 16, 32), feature_dim=48))
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    backdoor: BackdoorConfig = field(default_factory=BackdoorConfig)
    attacks: dict[str, AttackConfig] = field(default_factory=_default_attacks)
    whitebox: tuple[str, ...] = ATTACK_KINDS
    blackbox: tuple[str, ...] = ("FGSM", "BIM", "PGD", "JSMA", "UAP", "CW")
    detectors: tuple[str, ...] = ALL_DETECTORS
    attack_samples: int = 250
    detector_train_samples: int = 1000
    calibration_fraction: float = 0.2
    max_fpr: float = 0.01
    knn_k: int = 5
    gmm_components: int = 10

    def __post_init__(self):
        for name in self.whitebox + self.blackbox:
            if name not in self.attacks:
                raise ConfigError(f"attack {name!r} has no configuration")
        if "BADNET" in self.blackbox:
            raise ConfigError("BADNET has no black-box variant")
        for d in self.detectors:
            if d not in ALL_DETECTORS:
                raise ConfigError(f"unknown detector {d!r}")
        if not 0.0 < self.max_fpr < 1.0:
            raise ConfigError("max_fpr must lie in (0, 1)")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ConfigError("calibration_fraction must lie in (0, 1)")
        if self.attack_samples < 2:
            raise ConfigError("attack_samples must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


def _build(cls, raw: Any, where: str):
    """Recursively construct a dataclass from plain mappings, rejecting unknown keys."""
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _convert(fields[name].type, value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    "DataConfig": DataConfig,
    "SyntheticSpec": SyntheticSpec,
    "ClassifierConfig": ClassifierConfig,
    "AutoencoderConfig": AutoencoderConfig,
    "BackdoorConfig": BackdoorConfig,
}


def _convert(type_name: Any, value: Any, where: str):
    t = str(type_name)
    if t in _NESTED:
        return _build(_NESTED[t], value, where)
    if t.startswith("dict[str, AttackConfig]"):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping of attack configs")
        out = dict(_default_attacks())
        for name, sub in value.items():
            sub = dict(sub or {})
            sub.setdefault("kind", name)
            # overrides apply on top of the desk defaults for that attack
            merged = {**DESK_ATTACKS.get(str(sub["kind"]).upper(), {}), **sub}
            out[name.upper()] = _build(AttackConfig, merged, f"{where}.{name}")
        return out
    if t.startswith("tuple") and value is not None:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(v.upper() if isinstance(v, str) else v for v in value)
    return value


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    def plain(o):
        if isinstance(o, dict):
            return {k: plain(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [plain(v) for v in o]
        return o

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=True)
