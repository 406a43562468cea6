"""Uplink semi-grant-free NOMA cell: topology, fading, SIC rates, constraints.

All rates are spectral efficiencies (bits/s/Hz) and all powers are watts.
Every sub-channel carries at most one grant-based (GB) user, decoded first by
successive interference cancellation; grant-free (GF) users that chose the
same sub-channel are then decoded strongest-first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, NetworkConfig
from .seeding import as_rng

IDLE = -1

CONSTRAINT_NAMES = (
    "decode_order",
    "power_cap",
    "single_channel",
    "min_cluster",
    "gb_qos",
    "gf_qos",
    "max_cluster",
)


# --------------------------------------------------------------------------
# distributions


def distance_from_quantile(u, radius: float):
    """Inverse CDF of the uniform-in-disc distance law f(r) = 2r / R^2."""
    return radius * np.sqrt(u)


def distance_cdf(r, radius: float):
    return (np.asarray(r, dtype=float) / radius) ** 2


def fading_from_quantile(u):
    """Unit-mean exponential |h|^2 by inversion: -ln(u)."""
    return -np.log(u)


def path_gain(distance, fading, alpha: float):
    return fading * np.power(distance, -alpha)


# --------------------------------------------------------------------------
# types


@dataclass
class CellState:
    """User positions and the current slot's fading draws.

    GB user ``i`` sits on sub-channel ``gb_channel[i]``.  GF users are
    identified by their index, which doubles as the agent id.
    """

    gb_distance: np.ndarray
    gb_channel: np.ndarray
    gf_distance: np.ndarray
    gb_fading: np.ndarray
    gf_fading: np.ndarray
    slot_index: int = 0

    def __post_init__(self):
        self.gb_distance = np.asarray(self.gb_distance, dtype=float)
        self.gb_channel = np.asarray(self.gb_channel, dtype=int)
        self.gf_distance = np.asarray(self.gf_distance, dtype=float)
        self.gb_fading = np.asarray(self.gb_fading, dtype=float)
        self.gf_fading = np.asarray(self.gf_fading, dtype=float)
        if len(set(self.gb_channel.tolist())) != len(self.gb_channel):
            raise ValueError("at most one GB user per sub-channel")
        if self.gb_fading.shape != self.gb_distance.shape or self.gf_fading.shape != self.gf_distance.shape:
            raise ValueError("fading arrays must match the user arrays")

    @property
    def num_gb(self) -> int:
        return len(self.gb_distance)

    @property
    def num_gf(self) -> int:
        return len(self.gf_distance)

    @property
    def gb_users(self):
        return [(i, float(d), int(m)) for i, (d, m) in enumerate(zip(self.gb_distance, self.gb_channel))]

    @property
    def gf_users(self):
        return [(j, float(d)) for j, d in enumerate(self.gf_distance)]

    def gains(self, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        """Effective channel gains |h|^2 r^-alpha for (GB, GF) users."""
        return path_gain(self.gb_distance, self.gb_fading, alpha), path_gain(self.gf_distance, self.gf_fading, alpha)

    def gb_on_channel(self, num_channels: int) -> np.ndarray:
        """Index of the GB user per sub-channel, -1 where there is none."""
        out = np.full(num_channels, -1, dtype=int)
        out[self.gb_channel] = np.arange(self.num_gb)
        return out


@dataclass
class JointAction:
    """Per GF user: sub-channel index and power-level index, or IDLE (-1)."""

    channel: np.ndarray
    level: np.ndarray

    def __post_init__(self):
        self.channel = np.asarray(self.channel, dtype=int)
        self.level = np.asarray(self.level, dtype=int)
        if self.channel.shape != self.level.shape:
            raise ValueError("channel and level arrays must have equal length")

    @property
    def transmitting(self) -> np.ndarray:
        return self.channel != IDLE

    @classmethod
    def from_indices(cls, indices, config: NetworkConfig) -> "JointAction":
        """Decode flat action indices a = m * P_NP + p (IDLE is M * P_NP)."""
        a = np.asarray(indices, dtype=int)
        n_levels = config.num_power_levels
        n_regular = config.num_subchannels * n_levels
        if np.any(a < 0) or np.any(a >= config.num_actions):
            raise ValueError(f"action index outside [0, {config.num_actions})")
        idle = a >= n_regular
        channel = np.where(idle, IDLE, a // n_levels)
        level = np.where(idle, IDLE, a % n_levels)
        return cls(channel, level)

    def to_indices(self, config: NetworkConfig) -> np.ndarray:
        n_levels = config.num_power_levels
        idle_index = config.num_subchannels * n_levels
        return np.where(self.channel == IDLE, idle_index, self.channel * n_levels + self.level)


@dataclass
class ConstraintReport:
    decode_order: bool
    power_cap: bool
    single_channel: bool
    min_cluster: bool
    gb_qos: bool
    gf_qos: bool
    max_cluster: bool

    def all_ok(self) -> bool:
        return all(self.as_tuple())

    def as_tuple(self) -> tuple[bool, ...]:
        return tuple(getattr(self, name) for name in CONSTRAINT_NAMES)

    def as_dict(self) -> dict[str, bool]:
        return dict(zip(CONSTRAINT_NAMES, self.as_tuple()))


@dataclass
class InterferenceThresholds:
    """Largest aggregate GF received power each sub-channel's GB user tolerates."""

    phi: np.ndarray

    def __getitem__(self, m):
        return self.phi[m]

    def __len__(self):
        return len(self.phi)


@dataclass
class SlotOutcome:
    gb_rx: np.ndarray
    gf_rx: np.ndarray
    decoding_order: list
    order_valid: np.ndarray
    gb_sinr: np.ndarray
    gf_sinr: np.ndarray
    gb_rates: np.ndarray
    gf_rates: np.ndarray
    interference_per_channel: np.ndarray
    gf_power_per_channel: np.ndarray
    gf_count_per_channel: np.ndarray
    gb_count_per_channel: np.ndarray
    gb_target: float
    gf_target: float
    constraint_report: ConstraintReport | None = None

    @property
    def cumulative_capacity(self) -> float:
        return float(self.gb_rates.sum() + self.gf_rates.sum())

    @property
    def goodput(self) -> float:
        """Sum of rates of users that meet their own QoS target."""
        gb = self.gb_rates[self.gb_rates >= self.gb_target].sum()
        gf = self.gf_rates[self.gf_rates >= self.gf_target].sum()
        return float(gb + gf)

    @property
    def gb_violations(self) -> int:
        return int(np.count_nonzero(self.gb_rates < self.gb_target))


# --------------------------------------------------------------------------
# operations


def sample_topology(config: NetworkConfig, rng_seed, num_gf: int | None = None,
                    num_gb: int | None = None) -> CellState:
    """Place users uniformly in the disc and give each GB user its own sub-channel.

    In fixed-count mode the counts are ``num_gf`` / ``num_gb`` or, when
    omitted, the rounded densities.  In Poisson mode the counts are Poisson
    draws; a GB count above the number of sub-channels is clipped.
    """
    rng = as_rng(rng_seed)
    M = config.num_subchannels
    if config.poisson_counts:
        n_gb = min(int(rng.poisson(config.gb_density)), M)
        n_gf = int(rng.poisson(config.gf_density))
    else:
        n_gb = int(round(config.gb_density)) if num_gb is None else int(num_gb)
        n_gf = int(round(config.gf_density)) if num_gf is None else int(num_gf)
        if n_gb > M:
            raise ConfigError(f"invalid value for 'gb_density': {n_gb} GB users exceed {M} sub-channels")
    if n_gb < 0 or n_gf < 0:
        raise ConfigError("user counts must be non-negative")
    # 1 - U lies in (0, 1], so no user sits at the base station itself.
    gb_d = distance_from_quantile(1.0 - rng.random(n_gb), config.cell_radius)
    gf_d = distance_from_quantile(1.0 - rng.random(n_gf), config.cell_radius)
    gb_ch = np.sort(rng.permutation(M)[:n_gb])
    return CellState(gb_d, gb_ch, gf_d, np.ones(n_gb), np.ones(n_gf))


def draw_fading(state: CellState, rng_seed) -> CellState:
    """New state with i.i.d. unit-mean exponential |h|^2 for every user (GB first)."""
    rng = as_rng(rng_seed)
    draws = rng.standard_exponential(state.num_gb + state.num_gf)
    return replace(state, gb_fading=draws[: state.num_gb], gf_fading=draws[state.num_gb:])


def decoding_order(gb_rx: float | None, gf_rx, gf_ids=None, gb_id: int = 0):
    """SIC order on one sub-channel and whether the GB user really is strongest.

    Returns ``(order, valid)`` where ``order`` is a list of ``("GB", id)`` /
    ``("GF", id)`` labels.  GF users are sorted by descending received power,
    ties going to the lower id.
    """
    gf_rx = np.asarray(gf_rx, dtype=float)
    ids = np.arange(len(gf_rx)) if gf_ids is None else np.asarray(gf_ids)
    idx = np.lexsort((ids, -gf_rx))
    order = [("GF", int(ids[k])) for k in idx]
    if gb_rx is None:
        return order, True
    valid = bool(len(gf_rx) == 0 or gb_rx >= gf_rx.max())
    return [("GB", int(gb_id))] + order, valid


def _sic_sinr(rx_sorted: np.ndarray, noise: float) -> np.ndarray:
    """SINR of each user given strongest-first SIC over ``rx_sorted``."""
    later = np.cumsum(rx_sorted[::-1])[::-1] - rx_sorted
    return rx_sorted / (later + noise)


def compute_slot_rates(state: CellState, action: JointAction, config: NetworkConfig,
                       gb_power: float | None = None) -> SlotOutcome:
    """Evaluate one slot: received powers, SIC order, SINRs, rates and constraints."""
    M = config.num_subchannels
    if action.channel.shape != (state.num_gf,):
        raise ValueError(f"joint action covers {action.channel.shape[0]} users, cell has {state.num_gf}")
    n0 = config.noise_power
    p_gb = config.gb_fixed_power if gb_power is None else gb_power
    gb_gain, gf_gain = state.gains(config.path_loss_exp)
    levels = np.asarray(config.power_levels)
    tx = action.transmitting
    gf_power = np.where(tx, levels[np.where(tx, action.level, 0)], 0.0)
    gf_rx = gf_power * gf_gain
    gb_rx = p_gb * gb_gain

    gb_sinr = np.zeros(state.num_gb)
    gf_sinr = np.zeros(state.num_gf)
    interference = np.zeros(M)
    gf_power_ch = np.zeros(M)
    gf_count = np.zeros(M, dtype=int)
    gb_count = np.zeros(M, dtype=int)
    order_valid = np.ones(M, dtype=bool)
    orders = []
    gb_of = state.gb_on_channel(M)
    for m in range(M):
        members = np.flatnonzero(tx & (action.channel == m))
        rx = gf_rx[members]
        g = gb_of[m]
        order, valid = decoding_order(None if g < 0 else gb_rx[g], rx, members, max(g, 0))
        orders.append(order)
        order_valid[m] = valid
        interference[m] = rx.sum()
        gf_power_ch[m] = gf_power[members].sum()
        gf_count[m] = len(members)
        if g >= 0:
            gb_count[m] = 1
            gb_sinr[g] = gb_rx[g] / (interference[m] + n0)
        if len(members):
            sorted_ids = np.array([uid for kind, uid in order if kind == "GF"])
            gf_sinr[sorted_ids] = _sic_sinr(gf_rx[sorted_ids], n0)

    outcome = SlotOutcome(
        gb_rx=gb_rx,
        gf_rx=gf_rx,
        decoding_order=orders,
        order_valid=order_valid,
        gb_sinr=gb_sinr,
        gf_sinr=gf_sinr,
        gb_rates=np.log2(1.0 + gb_sinr),
        gf_rates=np.log2(1.0 + gf_sinr),
        interference_per_channel=interference,
        gf_power_per_channel=gf_power_ch,
        gf_count_per_channel=gf_count,
        gb_count_per_channel=gb_count,
        gb_target=config.gb_target_se,
        gf_target=config.gf_target_se,
    )
    outcome.constraint_report = check_constraints(outcome, action, config)
    return outcome


def check_constraints(outcome: SlotOutcome, action: JointAction, config: NetworkConfig) -> ConstraintReport:
    """Evaluate the feasibility conditions of a slot; never raises."""
    levels = np.asarray(config.power_levels)
    tx = action.transmitting
    M = config.num_subchannels
    in_range = np.all((action.channel >= IDLE) & (action.channel < M))
    level_ok = np.all(~tx | ((action.level >= 0) & (action.level < len(levels))))
    per_user = np.all(levels[action.level[tx & (action.level >= 0) & (action.level < len(levels))]]
                      <= config.max_user_power)
    per_channel = np.all(outcome.gf_power_per_channel <= config.max_channel_gf_power)
    users = outcome.gf_count_per_channel + outcome.gb_count_per_channel
    occupied = users > 0
    gf_rates = outcome.gf_rates[tx]
    return ConstraintReport(
        decode_order=bool(np.all(outcome.order_valid)),
        power_cap=bool(per_user and per_channel and level_ok),
        single_channel=bool(in_range and action.channel.ndim == 1),
        min_cluster=bool(np.all(users[occupied] >= 2)),
        gb_qos=bool(np.all(outcome.gb_rates >= config.gb_target_se)),
        gf_qos=bool(np.all(gf_rates >= config.gf_target_se)),
        max_cluster=bool(np.all(outcome.gf_count_per_channel <= config.max_gf_per_channel)),
    )


def interference_thresholds(state: CellState, config: NetworkConfig,
                            gb_power: float | None = None) -> InterferenceThresholds:
    """phi_m = max(0, P h / (2^tau - 1) - n0^2); +inf on channels without a GB user."""
    p_gb = config.gb_fixed_power if gb_power is None else gb_power
    gb_gain, _ = state.gains(config.path_loss_exp)
    phi = np.full(config.num_subchannels, np.inf)
    phi[state.gb_channel] = threshold_from_rx(p_gb * gb_gain, config.gb_target_se, config.noise_power)
    return InterferenceThresholds(phi)


def threshold_from_rx(gb_rx, target_se: float, noise: float):
    return np.maximum(0.0, np.asarray(gb_rx, dtype=float) / (2.0 ** target_se - 1.0) - noise)


def slot_reward(outcome: SlotOutcome, previous_capacity: float) -> float:
    """Shared team reward: the slot capacity if it did not drop and every constraint holds."""
    capacity = outcome.cumulative_capacity
    if capacity >= previous_capacity and outcome.constraint_report.all_ok():
        return capacity
    return 0.0


def env_step(state: CellState, joint_action: JointAction, previous_capacity: float,
             config: NetworkConfig):
    """Evaluate one slot and return ``(next_observation, reward, outcome)``.

    The observation is the vector of GF rates achieved in this slot.  The
    caller redraws fading for the next slot (see :class:`SGFNomaEnv`).
    """
    outcome = compute_slot_rates(state, joint_action, config)
    return outcome.gf_rates.copy(), slot_reward(outcome, previous_capacity), outcome


class SGFNomaEnv:
    """Stateful wrapper: fixed topology, per-episode fading stream, shared reward.

    ``fading_rng_factory(episode)`` supplies the fading generator for an
    episode.  With ``freeze_fading`` the fading of the given state is kept
    for every slot (used for frozen oracle instances).
    """

    def __init__(self, config: NetworkConfig, state: CellState, fading_rng_factory=None,
                 freeze_fading: bool = False):
        self.config = config
        self.state = state
        self.freeze_fading = freeze_fading
        self._factory = fading_rng_factory
        self._rng = None
        self.previous_capacity = 0.0
        n_levels = config.num_power_levels
        valid = np.asarray(config.power_levels) <= config.max_user_power
        mask = np.tile(valid, config.num_subchannels)
        if config.allow_idle:
            mask = np.append(mask, True)
        self.valid_actions = mask
        self._n_levels = n_levels

    @property
    def num_agents(self) -> int:
        return self.state.num_gf

    @property
    def observation_size(self) -> int:
        return self.state.num_gf

    def reset(self, episode: int = 0) -> np.ndarray:
        self.previous_capacity = 0.0
        self.state = replace(self.state, slot_index=0)
        if not self.freeze_fading:
            self._rng = self._factory(episode)
            self.state = draw_fading(self.state, self._rng)
        return np.zeros(self.state.num_gf)

    def step(self, action_indices):
        a = np.asarray(action_indices, dtype=int)
        if np.any(a < 0) or np.any(a >= len(self.valid_actions)):
            raise ValueError("action index out of range")
        if not np.all(self.valid_actions[a]):
            raise ValueError("a masked action reached the environment")
        action = JointAction.from_indices(a, self.config)
        obs, reward, outcome = env_step(self.state, action, self.previous_capacity, self.config)
        self.previous_capacity = outcome.cumulative_capacity
        nxt = self.state if self.freeze_fading else draw_fading(self.state, self._rng)
        self.state = replace(nxt, slot_index=self.state.slot_index + 1)
        return obs, reward, outcome
