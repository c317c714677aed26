"""Experiment configuration: TOML file with fixed sections, defaults at desk scale."""

import dataclasses
import os
from dataclasses import dataclass, field

import tomli

from .exceptions import ConfigError

ENV_OUTPUT_ROOT = "INVARIANTLAB_OUTPUT_ROOT"


@dataclass
class ExperimentSection:
    system: str = "spring-mass"
    output_dir: str = ""


@dataclass
class DataSection:
    n_traj: int = 5000
    n_steps: int = 199
    dt: float = 0.005
    seed: int = 0
    noise_fraction: float = 0.0
    noise_seed: int = 1
    split_seed: int = 42
    train_fraction: float = 0.9


@dataclass
class LossSection:
    lambda_var: float = 1.0
    var_epsilon: float = 0.1
    lambda_align: float = 0.2


@dataclass
class CdnSection:
    hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    epochs: int = 60
    batch_size: int = 32
    pairs_per_trajectory: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    seed: int = 0


@dataclass
class SeSection:
    hidden: list = field(default_factory=lambda: [128, 128])
    epochs: int = 100
    batch_size: int = 32
    pairs_per_trajectory: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    seed: int = 0


@dataclass
class PolySection:
    schedule: str = "short"
    short_epochs: int = 256
    short_n_traj: int = 20000
    long_epochs: int = 512
    long_n_traj: int = 100000
    batch_size: int = 8192
    pairs_per_trajectory: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 200
    restart_period: int = 50
    period_multiplier: int = 2
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class DdpmSection:
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    n_diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    embed_dim: int = 32
    epochs: int = 60
    batch_size: int = 256
    transitions_per_trajectory: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-5
    seed: int = 0


@dataclass
class RolloutSection:
    horizon: int = 199
    n_rollouts: int = 64
    projection_steps: int = 1
    projection_epsilon: float = 1e-8
    seed: int = 0


@dataclass
class SymregSection:
    threshold: float = 0.05
    ridge_lambda: float = 1e-10
    max_iterations: int = 20
    n_states: int = 20000
    decimals: int = 2


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    cdn: CdnSection = field(default_factory=CdnSection)
    se: SeSection = field(default_factory=SeSection)
    poly: PolySection = field(default_factory=PolySection)
    ddpm: DdpmSection = field(default_factory=DdpmSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    symreg: SymregSection = field(default_factory=SymregSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def output_root(self) -> str:
        return self.experiment.output_dir or os.environ.get(ENV_OUTPUT_ROOT) or "runs"


def _coerce(section, name, value, default):
    where = f"[{section}] {name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    sections = {f.name for f in dataclasses.fields(cfg)}
    for sname, body in raw.items():
        if sname not in sections:
            raise ConfigError(f"unknown config section [{sname}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sname}] must be a table")
        section = getattr(cfg, sname)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sname}]")
            setattr(section, key, _coerce(sname, key, value, getattr(section, key)))
    if cfg.poly.schedule not in ("short", "long"):
        raise ConfigError("[poly] schedule must be 'short' or 'long'")
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(raw)
