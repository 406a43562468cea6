"""Power pools, open-loop access for fresh users, and fixed-power baselines.

Every protocol here is driven by :func:`rollout`, which draws positions,
fading and random choices from seed-derived streams that do not depend on
the protocol.  Two protocols evaluated with the same seed therefore see the
same users, the same channel realizations and the same sub-channel picks,
and differ only in how the transmit power is chosen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import NetworkConfig
from .env import (
    CellState,
    JointAction,
    compute_slot_rates,
    distance_from_quantile,
    draw_fading,
    interference_thresholds,
    slot_reward,
)
from .seeding import make_rng


@dataclass
class PowerPool:
    """Per sub-channel set of sanctioned power levels (watts)."""

    levels: list[tuple[float, ...]]
    frequencies: list[tuple[float, ...]]
    phi: np.ndarray
    defaulted: list[bool] = field(default_factory=list)
    exceeds_phi: list[tuple[float, ...]] = field(default_factory=list)
    min_frequency: float = 0.05

    @property
    def num_channels(self) -> int:
        return len(self.levels)

    def level_indices(self, config: NetworkConfig) -> list[np.ndarray]:
        grid = np.asarray(config.power_levels)
        return [np.array([int(np.argmin(np.abs(grid - p))) for p in pool]) for pool in self.levels]

    def to_dict(self) -> dict:
        return {
            "min_frequency": self.min_frequency,
            "channels": [
                {
                    "channel": m,
                    "levels": list(self.levels[m]),
                    "frequencies": list(self.frequencies[m]),
                    "phi": _finite_or_str(self.phi[m]),
                    "defaulted": bool(self.defaulted[m]) if self.defaulted else False,
                    "exceeds_phi": list(self.exceeds_phi[m]) if self.exceeds_phi else [],
                }
                for m in range(self.num_channels)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PowerPool":
        chans = sorted(data["channels"], key=lambda c: c["channel"])
        return cls(
            levels=[tuple(float(p) for p in c["levels"]) for c in chans],
            frequencies=[tuple(float(f) for f in c["frequencies"]) for c in chans],
            phi=np.array([float(c["phi"]) for c in chans]),
            defaulted=[bool(c.get("defaulted", False)) for c in chans],
            exceeds_phi=[tuple(float(p) for p in c.get("exceeds_phi", [])) for c in chans],
            min_frequency=float(data.get("min_frequency", 0.05)),
        )

    def table(self) -> str:
        lines = ["channel  phi[W]        levels[W] (frequency)"]
        for m in range(self.num_channels):
            items = ", ".join(f"{p:g} ({f:.2f})" for p, f in zip(self.levels[m], self.frequencies[m]))
            note = "  [never selected, lowest level]" if self.defaulted and self.defaulted[m] else ""
            lines.append(f"{m:>7}  {self.phi[m]:<12.4g}  {items}{note}")
        return "\n".join(lines)


def _finite_or_str(x: float):
    return float(x) if np.isfinite(x) else "inf"


@dataclass
class BroadcastMessage:
    """What the base station announces: pools, thresholds and the QoS targets."""

    pools: PowerPool
    phi: np.ndarray
    gb_target: float
    gf_target: float

    @classmethod
    def from_pool(cls, pool: PowerPool, config: NetworkConfig) -> "BroadcastMessage":
        if len(pool.levels) != config.num_subchannels or len(pool.phi) != config.num_subchannels:
            raise ValueError("broadcast needs one pool and one threshold per sub-channel")
        return cls(pool, pool.phi.copy(), config.gb_target_se, config.gf_target_se)


def expected_thresholds(topology: CellState, config: NetworkConfig) -> np.ndarray:
    """Thresholds computed with unit (mean) fading on every GB link."""
    mean_state = replace(topology, gb_fading=np.ones(topology.num_gb), gf_fading=np.ones(topology.num_gf))
    return interference_thresholds(mean_state, config).phi


def extract_pools(actions, config: NetworkConfig, min_frequency: float = 0.05,
                  topology: CellState | None = None, min_slots: int = 100) -> PowerPool:
    """Frequency-thresholded pools from a greedy evaluation stream.

    ``actions`` is ``(slots, agents)`` of flat action indices (or an
    evaluation stream carrying them).  A level joins channel m's pool when
    its share of the selections made on m exceeds ``min_frequency``; if none
    does, the most frequent level is kept.  A channel nobody selected gets
    the lowest level and is flagged in ``defaulted``.
    """
    actions = np.asarray(getattr(actions, "actions", actions))
    if actions.ndim != 2 or actions.shape[0] < min_slots:
        raise ValueError(f"pool extraction needs at least {min_slots} evaluation slots")
    joint = JointAction.from_indices(actions.reshape(-1), config)
    tx = joint.transmitting
    M, P = config.num_subchannels, config.num_power_levels
    counts = np.zeros((M, P), dtype=np.int64)
    np.add.at(counts, (joint.channel[tx], joint.level[tx]), 1)
    grid = np.asarray(config.power_levels)
    levels, freqs, defaulted = [], [], []
    for m in range(M):
        total = counts[m].sum()
        if total == 0:
            levels.append((float(grid[0]),))
            freqs.append((1.0,))
            defaulted.append(True)
            continue
        share = counts[m] / total
        keep = np.flatnonzero(share > min_frequency)
        if len(keep) == 0:
            keep = np.array([int(np.argmax(counts[m]))])
        kept = counts[m, keep].astype(float)
        levels.append(tuple(float(grid[k]) for k in keep))
        freqs.append(tuple((kept / kept.sum()).tolist()))
        defaulted.append(False)
    if topology is not None:
        phi = expected_thresholds(topology, config)
    else:
        phi = np.full(M, np.inf)
    exceeds = []
    median_gain = (config.cell_radius / np.sqrt(2.0)) ** (-config.path_loss_exp)
    for m in range(M):
        exceeds.append(tuple(p for p in levels[m] if p * median_gain > phi[m]))
    return PowerPool(levels, freqs, phi, defaulted, exceeds, min_frequency)


# --------------------------------------------------------------------------
# paired rollouts


@dataclass
class ThroughputStats:
    protocol: str
    seed: int
    slots: int
    mean_capacity: float
    mean_goodput: float
    mean_reward: float
    gb_violation_rate: float
    feasible_rate: float
    per_slot_goodput: np.ndarray = field(repr=False, default=None)
    per_slot_capacity: np.ndarray = field(repr=False, default=None)

    def as_row(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "slots": self.slots,
            "mean_capacity": self.mean_capacity,
            "mean_goodput": self.mean_goodput,
            "mean_reward": self.mean_reward,
            "gb_violation_rate": self.gb_violation_rate,
            "feasible_rate": self.feasible_rate,
        }


def fresh_gf_positions(config: NetworkConfig, num_users: int, seed: int, block: int) -> np.ndarray:
    rng = make_rng(seed, "fresh_users", block)
    return distance_from_quantile(1.0 - rng.random(num_users), config.cell_radius)


def rollout(policy, config: NetworkConfig, topology: CellState, slots: int, seed: int,
            steps_per_block: int = 100, fresh_users: bool = False, num_fresh_users: int | None = None,
            drop_gb: bool = False, protocol: str = "policy") -> ThroughputStats:
    """Run ``policy`` for ``slots`` slots in blocks of ``steps_per_block``.

    Block b uses fading stream ``evaluation/b`` and choice stream
    ``choices/b``; with ``fresh_users`` the GF population is redrawn per
    block from ``fresh_users/b`` (GB users always come from ``topology``).
    ``policy(obs, channel_pick, level_quantile) -> action indices`` receives
    the previous slot's GF rates plus this slot's uniform channel pick and
    level quantile for each user; a policy may ignore either.
    """
    M = config.num_subchannels
    goodput, capacity, reward, gbv, feas = [], [], [], [], []
    n_gb_slots = 0
    blocks = -(-slots // steps_per_block)
    for b in range(blocks):
        state = topology
        if fresh_users:
            n = topology.num_gf if num_fresh_users is None else num_fresh_users
            d = fresh_gf_positions(config, n, seed, b)
            state = CellState(topology.gb_distance, topology.gb_channel, d, topology.gb_fading, np.ones(n))
        n = state.num_gf
        fading_rng = make_rng(seed, "evaluation", b)
        choice_rng = make_rng(seed, "choices", b)
        state = draw_fading(state, fading_rng)
        previous = 0.0
        obs = np.zeros(n)
        for _ in range(min(steps_per_block, slots - b * steps_per_block)):
            channel_pick = choice_rng.integers(M, size=n)
            level_quantile = choice_rng.random(n)
            action = JointAction.from_indices(policy(obs, channel_pick, level_quantile), config)
            eval_state = state
            if drop_gb:
                eval_state = CellState(np.zeros(0), np.zeros(0, dtype=int), state.gf_distance,
                                       np.zeros(0), state.gf_fading)
            out = compute_slot_rates(eval_state, action, config)
            r = slot_reward(out, previous)
            previous = out.cumulative_capacity
            obs = out.gf_rates
            goodput.append(out.goodput)
            capacity.append(out.cumulative_capacity)
            reward.append(r)
            gbv.append(out.gb_violations)
            feas.append(out.constraint_report.all_ok())
            n_gb_slots += eval_state.num_gb
            state = draw_fading(state, fading_rng)
    goodput = np.array(goodput)
    capacity = np.array(capacity)
    return ThroughputStats(
        protocol=protocol,
        seed=seed,
        slots=len(goodput),
        mean_capacity=float(capacity.mean()),
        mean_goodput=float(goodput.mean()),
        mean_reward=float(np.mean(reward)),
        gb_violation_rate=float(np.sum(gbv) / n_gb_slots) if n_gb_slots else 0.0,
        feasible_rate=float(np.mean(feas)),
        per_slot_goodput=goodput,
        per_slot_capacity=capacity,
    )


def _level_index(config: NetworkConfig, level: float) -> int:
    grid = np.asarray(config.power_levels)
    hits = np.flatnonzero(np.isclose(grid, level, rtol=0, atol=1e-12))
    if len(hits) == 0:
        raise ValueError(f"level {level} W is not one of the configured power levels")
    return int(hits[0])


def max_valid_level(config: NetworkConfig) -> float:
    grid = np.asarray(config.power_levels)
    return float(grid[grid <= config.max_user_power].max())


def fixed_level_policy(config: NetworkConfig, level: float):
    p = _level_index(config, level)
    P = config.num_power_levels
    return lambda obs, channel, u: channel * P + p


def pool_policy(pool: PowerPool, config: NetworkConfig):
    """Uniform channel, then a uniform level from that channel's pool."""
    idx = pool.level_indices(config)
    sizes = np.array([len(i) for i in idx])
    table = np.full((config.num_subchannels, sizes.max()), -1)
    for m, i in enumerate(idx):
        table[m, : len(i)] = i
    P = config.num_power_levels

    def policy(obs, channel, u):
        k = np.minimum((u * sizes[channel]).astype(int), sizes[channel] - 1)
        return channel * P + table[channel, k]

    return policy


def uniform_level_policy(config: NetworkConfig):
    valid = np.flatnonzero(np.asarray(config.power_levels) <= config.max_user_power)
    P = config.num_power_levels

    def policy(obs, channel, u):
        k = np.minimum((u * len(valid)).astype(int), len(valid) - 1)
        return channel * P + valid[k]

    return policy


def team_policy(team, observation_mode: str = "global"):
    from .agents import observe

    return lambda obs, channel, u: team.greedy(observe(obs, team.num_agents, observation_mode))


def open_loop_simulate(pools: PowerPool, config: NetworkConfig, topology: CellState,
                       num_fresh_users: int, slots: int, seed: int) -> ThroughputStats:
    """Fresh GF users pick a channel uniformly, then a level uniformly from its pool."""
    return rollout(pool_policy(pools, config), config, topology, slots, seed, fresh_users=True,
                   num_fresh_users=num_fresh_users, protocol="pooled_open_loop")


def baseline_fpa(config: NetworkConfig, level: float, topology: CellState, slots: int, seed: int,
                 num_fresh_users: int | None = None, fresh_users: bool = True) -> ThroughputStats:
    """Fixed power allocation: every GF user at ``level`` on a uniformly chosen channel."""
    return rollout(fixed_level_policy(config, level), config, topology, slots, seed,
                   fresh_users=fresh_users, num_fresh_users=num_fresh_users, protocol=f"fpa_{level:g}")


def baseline_fixed_sgf(config: NetworkConfig, topology: CellState, slots: int, seed: int,
                       level: float | None = None, fresh_users: bool = False,
                       num_fresh_users: int | None = None) -> ThroughputStats:
    """GB users decoded first, every GF user at one fixed level (the largest allowed by default)."""
    level = max_valid_level(config) if level is None else level
    stats = rollout(fixed_level_policy(config, level), config, topology, slots, seed,
                    fresh_users=fresh_users, num_fresh_users=num_fresh_users, protocol="fixed_sgf")
    return stats


def baseline_pure_gf(config: NetworkConfig, topology: CellState, slots: int, seed: int,
                     level: float | None = None, uniform_levels: bool = False,
                     fresh_users: bool = False, num_fresh_users: int | None = None) -> ThroughputStats:
    """No GB users at all; every GF user transmits and SIC runs over GF users only."""
    if uniform_levels:
        policy = uniform_level_policy(config)
    else:
        policy = fixed_level_policy(config, max_valid_level(config) if level is None else level)
    return rollout(policy, config, topology, slots, seed, fresh_users=fresh_users,
                   num_fresh_users=num_fresh_users, drop_gb=True, protocol="pure_gf")


def learned_policy_stats(team, config: NetworkConfig, topology: CellState, slots: int, seed: int,
                         observation_mode: str = "global") -> ThroughputStats:
    return rollout(team_policy(team, observation_mode), config, topology, slots, seed, protocol="learned")


def compare_baselines(team, config: NetworkConfig, topology: CellState, slots: int, seed: int,
                      observation_mode: str = "global") -> list[ThroughputStats]:
    """Learned policy against fixed-power SGF and pure GF on the training users, paired by seed."""
    return [
        learned_policy_stats(team, config, topology, slots, seed, observation_mode),
        baseline_fixed_sgf(config, topology, slots, seed),
        baseline_pure_gf(config, topology, slots, seed),
    ]


def compare_open_loop(pool: PowerPool, config: NetworkConfig, topology: CellState,
                      num_fresh_users: int, slots: int, seed: int) -> list[ThroughputStats]:
    """Pooled open-loop access against FPA at every configured level (paired)."""
    out = [open_loop_simulate(pool, config, topology, num_fresh_users, slots, seed)]
    for level in config.power_levels:
        if level <= config.max_user_power:
            out.append(baseline_fpa(config, level, topology, slots, seed, num_fresh_users))
    return out


def replay_pools_on_topology(pool: PowerPool, actions, config: NetworkConfig, topology: CellState,
                             slots: int, seed: int) -> ThroughputStats:
    """Training users keep their usual channel and draw levels from its pool."""
    actions = np.asarray(getattr(actions, "actions", actions))
    P = config.num_power_levels
    channels = actions // P
    home = np.array([np.bincount(channels[:, i], minlength=config.num_subchannels).argmax()
                     for i in range(actions.shape[1])])
    inner = pool_policy(pool, config)
    return rollout(lambda obs, ch, u: inner(obs, home, u), config, topology, slots, seed,
                   protocol="pool_replay")
