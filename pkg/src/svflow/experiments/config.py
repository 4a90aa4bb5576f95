"""Experiment configuration: dataclasses with strict JSON loading.

Unknown keys are rejected instead of silently defaulted, and ``key=value``
overrides are parsed as JSON (falling back to a bare string).
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid, missing or unreadable configuration."""


SNAPSHOT_TIMES = [0.2, 0.4, 0.6, 0.8, 1.0]


@dataclass
class Toy2dConfig:
    seed: int = 0
    n_train: int = 8192
    n_eval: int = 2048
    noise: float = 0.06
    num_components: int = 8
    num_steps: int = 100
    step_size: float = 0.01
    posterior_mode: str = "untied"
    batch_size: int = 512
    iterations: int = 10_000
    lr: float = 0.01
    betas: list = field(default_factory=lambda: [0.0, 0.1, 0.5, "inf"])
    log_every: int = 100
    snapshot_times: list = field(default_factory=lambda: list(SNAPSHOT_TIMES))
    snapshot_points: int = 512
    grid_size: int = 41
    grid_bounds: list = field(default_factory=lambda: [-1.5, 2.5, -1.0, 1.5])
    init_mean_scale: float = 1.0
    init_logit_scale: float = 0.1


@dataclass
class VmfConfig:
    seed: int = 0
    dim: int = 8
    num_clusters: int = 4
    kappa_data: float = 20.0
    n_train: int = 4096
    n_eval: int = 1024
    num_components: int = 8
    num_steps: int = 20
    step_size: float = 0.1
    posterior_mode: str = "untied"
    mode: str = "spherical"
    beta: float = 0.1
    batch_size: int = 256
    iterations: int = 1000
    lr: float = 0.01
    log_every: int = 50
    gradcheck_batch: int = 8
    gradcheck_coords: int = 24


@dataclass
class CouplingConfig:
    seed: int = 0
    vocab: int = 8
    length: int = 64
    dim: int = 16
    window: int = 8
    num_layers: int = 4
    num_heads: int = 4
    num_experts: int = 8
    num_sequences: int = 256
    eval_sequences: int = 64
    steps: int = 600
    batch: int = 16
    lr: float = 0.003
    balance_weight: float = 0.01
    log_every: int = 50


@dataclass
class ShuffleConfig:
    seed: int = 0
    vocab: int = 8
    length: int = 64
    dim: int = 16
    window: int = 8
    num_layers: int = 6
    num_heads: int = 4
    num_sequences: int = 256
    eval_sequences: int = 64
    steps: int = 600
    batch: int = 16
    lr: float = 0.003
    proportions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 0.95])
    shuffle_seeds: int = 4
    deep_fraction: float = 1.0 / 3.0


@dataclass
class KernelConfig:
    seed: int = 0
    dim: int = 2
    key_std: float = 1.0
    qk_scale: float = 0.5
    sizes: list = field(default_factory=lambda: [64, 256, 1024, 4096])
    num_seeds: int = 200
    resolution: int = 40


EXPERIMENTS = {
    "toy2d": Toy2dConfig,
    "vmf": VmfConfig,
    "coupling": CouplingConfig,
    "shuffle": ShuffleConfig,
    "kernel": KernelConfig,
}


def parse_beta(b):
    """Numbers pass through; "inf" (any case) is the J_var-only sentinel."""
    if isinstance(b, str):
        if b.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"beta must be a number or 'inf', got {b!r}")
    if isinstance(b, bool) or not isinstance(b, (int, float)) or b < 0:
        raise ConfigError(f"beta must be a nonnegative number, got {b!r}")
    return float(b)


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return value
    return value


def build_config(experiment, values=None, overrides=()):
    """Config object for ``experiment`` from a dict plus ``key=value`` overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    cls = EXPERIMENTS[experiment]
    values = dict(values or {})
    declared = values.pop("experiment", experiment)
    if declared != experiment:
        raise ConfigError(f"config is for experiment {declared!r}, not {experiment!r}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            values[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            values[key.strip()] = raw
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {experiment}: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    cfg = cls(**kwargs)
    if hasattr(cfg, "betas"):
        for b in cfg.betas:
            parse_beta(b)
    return cfg


def load_config(experiment, path=None, overrides=()):
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    return build_config(experiment, values, overrides)


def config_to_json(cfg):
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)
