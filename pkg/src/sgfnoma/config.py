"""Configuration objects and the config-file / flag parser."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

DEFAULT_POWER_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


def _require(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"invalid value for '{key}': {msg}")


@dataclass(frozen=True)
class NetworkConfig:
    """Physical and protocol constants of one cell.

    Rates and QoS targets are spectral efficiencies in bits/s/Hz.
    """

    cell_radius: float = 1000.0
    path_loss_exp: float = 3.0
    noise_power: float = dbm_to_watts(-90.0)
    subchannel_bandwidth: float = 10e3
    num_subchannels: int = 3
    gb_target_se: float = 15.0
    gf_target_se: float = 4.0
    power_levels: tuple[float, ...] = DEFAULT_POWER_LEVELS
    max_user_power: float = 0.9
    max_channel_gf_power: float = math.inf
    gf_density: float = 12.0
    gb_density: float = 3.0
    max_gf_per_channel: int = 4
    gb_fixed_power: float = 1000.0
    poisson_counts: bool = False
    allow_idle: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "power_levels", tuple(float(p) for p in self.power_levels))
        levels = self.power_levels
        _require(len(levels) >= 1, "power_levels", "at least one level required")
        _require(all(p > 0 for p in levels), "power_levels", "levels must be positive")
        _require(all(a < b for a, b in zip(levels, levels[1:])), "power_levels",
                 "levels must be strictly increasing")
        _require(self.cell_radius > 0, "cell_radius", "must be > 0")
        _require(self.path_loss_exp > 2, "path_loss_exp", "must be > 2")
        _require(self.noise_power > 0, "noise_power", "must be > 0")
        _require(self.subchannel_bandwidth > 0, "subchannel_bandwidth", "must be > 0")
        _require(int(self.num_subchannels) == self.num_subchannels and self.num_subchannels >= 1,
                 "num_subchannels", "must be an integer >= 1")
        _require(self.gf_target_se > 0, "gf_target_se", "must be > 0")
        _require(self.gb_target_se > self.gf_target_se, "gb_target_se",
                 "GB target must exceed the GF target")
        _require(self.max_user_power > 0, "max_user_power", "must be > 0")
        _require(self.max_channel_gf_power > 0, "max_channel_gf_power", "must be > 0")
        _require(self.gf_density >= 0, "gf_density", "must be >= 0")
        _require(self.gb_density >= 0, "gb_density", "must be >= 0")
        _require(int(self.max_gf_per_channel) == self.max_gf_per_channel
                 and self.max_gf_per_channel >= 1, "max_gf_per_channel", "must be an integer >= 1")
        _require(self.gb_fixed_power > 0, "gb_fixed_power", "must be > 0")

    @property
    def total_bandwidth(self) -> float:
        return self.subchannel_bandwidth * self.num_subchannels

    @property
    def num_power_levels(self) -> int:
        return len(self.power_levels)

    @property
    def num_actions(self) -> int:
        """Size of one agent's action space (plus one when idling is allowed)."""
        return self.num_subchannels * self.num_power_levels + (1 if self.allow_idle else 0)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    algorithm: str = "dueling"
    num_agents: int = 12
    episodes: int = 500
    steps_per_episode: int = 100
    discount: float = 0.9
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = (250, 120, 60)
    replay_capacity: int = 10_000
    batch_size: int = 32
    target_update: int = 1000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay_fraction: float = 0.8
    grad_clip: float | None = None
    observation: str = "global"
    dtype: str = "float32"
    seeds: tuple[int, ...] = (0,)
    eval_episodes: int = 10
    pool_min_frequency: float = 0.05
    baseline_slots: int = 2000
    sweep_power_levels: tuple[int, ...] = (1, 3, 5, 7, 9)
    sweep_cluster_sizes: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    sweep_agent_counts: tuple[int, ...] = (9, 12, 15, 24, 30)

    def __post_init__(self) -> None:
        for name in ("hidden", "seeds", "sweep_power_levels", "sweep_cluster_sizes",
                     "sweep_agent_counts"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        _require(self.algorithm in ("ddqn", "dueling"), "algorithm", "expected 'ddqn' or 'dueling'")
        _require(self.num_agents >= 0, "num_agents", "must be >= 0")
        _require(self.episodes >= 1, "episodes", "must be >= 1")
        _require(self.steps_per_episode >= 1, "steps_per_episode", "must be >= 1")
        _require(0 < self.discount <= 1, "discount", "must lie in (0, 1]")
        _require(self.learning_rate > 0, "learning_rate", "must be > 0")
        _require(0 <= self.adam_beta1 < 1, "adam_beta1", "must lie in [0, 1)")
        _require(0 <= self.adam_beta2 < 1, "adam_beta2", "must lie in [0, 1)")
        _require(self.adam_eps > 0, "adam_eps", "must be > 0")
        _require(self.replay_capacity >= 1, "replay_capacity", "must be >= 1")
        _require(1 <= self.batch_size <= self.replay_capacity, "batch_size",
                 "must lie in [1, replay_capacity]")
        _require(self.target_update >= 1, "target_update", "must be >= 1")
        _require(0 <= self.epsilon_end <= self.epsilon_start <= 1, "epsilon_start",
                 "need 0 <= epsilon_end <= epsilon_start <= 1")
        _require(0 < self.epsilon_decay_fraction <= 1, "epsilon_decay_fraction", "must lie in (0, 1]")
        _require(self.grad_clip is None or self.grad_clip > 0, "grad_clip", "must be > 0")
        _require(self.observation in ("global", "own_first"), "observation",
                 "expected 'global' or 'own_first'")
        _require(self.dtype in ("float32", "float64"), "dtype", "expected 'float32' or 'float64'")
        _require(len(self.seeds) >= 1, "seeds", "at least one seed required")
        _require(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        _require(0 <= self.pool_min_frequency < 1, "pool_min_frequency", "must lie in [0, 1)")
        _require(self.baseline_slots >= 1, "baseline_slots", "must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def replace(self, **changes) -> "ExperimentConfig":
        net_changes = {k: changes.pop(k) for k in list(changes) if k in _NETWORK_KEYS}
        network = changes.pop("network", self.network)
        if net_changes:
            network = network.replace(**net_changes)
        return dataclasses.replace(self, network=network, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: _plain(getattr(self, f.name)) for f in fields(self) if f.name != "network"}
        out["network"] = {f.name: _plain(getattr(self.network, f.name)) for f in fields(self.network)}
        return out


_NETWORK_KEYS = {f.name for f in fields(NetworkConfig)}
_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"network"}


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def _coerce(key: str, value, template):
    """Coerce a parsed file/flag value to the type of the default."""
    try:
        if isinstance(template, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(template, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                value = [value]
            elem = type(template[0]) if template else float
            return tuple(elem(v) for v in value)
        if isinstance(template, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(template, float):
            return float(value)
        if template is None:
            return None if value in (None, "none", "None") else float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for '{key}': {value!r}") from exc


def parse_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
                 ) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a YAML/JSON file plus overrides.

    Network keys may sit at top level or under a ``network:`` mapping.
    ``overrides`` (typically command-line flags) win over file values.  A run
    manifest written by the CLI is accepted as a config file as well.
    Unknown keys and out-of-range values raise :class:`ConfigError`.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text) if text.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not a well-formed key-value document") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a key-value mapping")
        if "manifest_version" in loaded:
            loaded = loaded["config"]
        raw.update(loaded)
    return config_from_mapping(raw, overrides)


def config_from_mapping(raw: Mapping[str, Any], overrides: Mapping[str, Any] | None = None
                        ) -> ExperimentConfig:
    raw = dict(raw)
    nested = raw.pop("network", None) or {}
    if not isinstance(nested, dict):
        raise ConfigError("invalid value for 'network': expected a mapping")
    flat = {**nested, **raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}

    defaults_net = NetworkConfig()
    defaults_exp = ExperimentConfig()
    net_kwargs: dict[str, Any] = {}
    exp_kwargs: dict[str, Any] = {}
    for key, value in flat.items():
        if key in _NETWORK_KEYS:
            net_kwargs[key] = _coerce(key, value, getattr(defaults_net, key))
        elif key in _EXPERIMENT_KEYS:
            exp_kwargs[key] = _coerce(key, value, getattr(defaults_exp, key))
        else:
            raise ConfigError(f"unknown configuration key '{key}'")
    return ExperimentConfig(network=NetworkConfig(**net_kwargs), **exp_kwargs)
