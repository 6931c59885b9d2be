"""Experiment configuration: nested dataclasses with strict JSON round-tripping.

``load_config`` rejects unknown keys at every level and fills defaults, so
``effective_config_json`` always shows every hyperparameter a run used.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .envs import ENV_IDS, QUALITIES
from .losses import LocalLossConfig
from .rectifier import RectifierConfig

ALGORITHMS = ("forler", "fed_cql", "fed_td3bc", "centralized_cql")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    quality: str = "medium"
    size: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.quality not in QUALITIES:
            raise ConfigError(f"unknown dataset quality {self.quality!r}; expected one of {QUALITIES}")
        if self.size < 1:
            raise ConfigError("dataset size must be positive")


@dataclass(frozen=True)
class FederationOptions:
    beta_ent: float = 0.0
    omega_s: float = 0.0
    server_steps: int = 200
    server_batch: int = 256
    stochastic_server: bool = False
    init_log_std: float = -1.6094379124341003  # log 0.2
    polyak_tau: float = 0.005
    lr: float = 3e-4
    actor_lr: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    rectify: bool = True
    probe_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.beta_ent < 0 or self.omega_s < 0:
            raise ConfigError("beta_ent and omega_s must be non-negative")
        if self.server_steps < 0 or self.server_batch < 1 or self.probe_size < 1:
            raise ConfigError("server_steps must be >= 0, server_batch and probe_size >= 1")
        if not 0.0 < self.polyak_tau <= 1.0:
            raise ConfigError("polyak_tau must lie in (0, 1]")
        if self.lr <= 0 or (self.actor_lr is not None and self.actor_lr <= 0):
            raise ConfigError("lr and actor_lr must be positive")

    @property
    def policy_lr(self) -> float:
        return self.lr if self.actor_lr is None else self.actor_lr


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "forler"
    env_id: str = "pointmass-2d"
    rounds: int = 30
    local_steps: int = 200
    batch_size: int = 256
    devices: tuple[DatasetSpec, ...] = (DatasetSpec("medium", 20_000, 1), DatasetSpec("medium", 20_000, 2))
    server_dataset: DatasetSpec = DatasetSpec("medium", 20_000, 1000)
    loss: LocalLossConfig = LocalLossConfig()
    rectifier: RectifierConfig = RectifierConfig()
    federation: FederationOptions = FederationOptions()
    eval_episodes: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.env_id not in ENV_IDS:
            raise ConfigError(f"unknown env_id {self.env_id!r}; valid ids: {', '.join(ENV_IDS)}")
        if not self.devices:
            raise ConfigError("at least one device dataset is required")
        if self.rounds < 0 or self.local_steps < 0 or self.batch_size < 1 or self.eval_episodes < 1:
            raise ConfigError("rounds/local_steps must be >= 0, batch_size/eval_episodes >= 1")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.algorithm == "fed_td3bc" and self.env_id != "pointmass-2d":
            raise ConfigError("fed_td3bc needs a continuous-action environment")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_plain(cfg)


_NESTED = {"loss": LocalLossConfig, "rectifier": RectifierConfig,
           "federation": FederationOptions, "server_dataset": DatasetSpec}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kwargs = dict(data)
    for key, cls in _NESTED.items():
        if key in kwargs:
            kwargs[key] = _build(cls, kwargs[key], key)
    if "devices" in kwargs:
        if not isinstance(kwargs["devices"], list):
            raise ConfigError("devices must be a list")
        kwargs["devices"] = tuple(_build(DatasetSpec, d, f"devices[{i}]")
                                  for i, d in enumerate(kwargs["devices"]))
    return _build(ExperimentConfig, kwargs, "config")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def effective_config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(effective_config_json(cfg).encode()).hexdigest()[:16]


def pollution_config(**overrides) -> ExperimentConfig:
    """Four high-quality devices (expert, medium-expert, medium, medium-replay) plus two random ones."""
    devices = (DatasetSpec("expert", 20_000, 11), DatasetSpec("mixed", 20_000, 12),
               DatasetSpec("medium", 20_000, 13), DatasetSpec("medium_replay", 20_000, 14),
               DatasetSpec("random", 20_000, 15), DatasetSpec("random", 20_000, 16))
    base = ExperimentConfig(devices=devices)
    return base.replace(**overrides) if overrides else base
