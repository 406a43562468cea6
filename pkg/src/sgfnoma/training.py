"""Episode loop, metrics, greedy evaluation and parameter sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import AgentTeam, EpsilonSchedule, observe, select_action
from .config import ExperimentConfig, NetworkConfig
from .env import (
    CONSTRAINT_NAMES,
    CellState,
    JointAction,
    SGFNomaEnv,
    draw_fading,
    env_step,
    sample_topology,
    slot_reward,
)
from .seeding import make_rng

log = logging.getLogger(__name__)

MA_WINDOW = 50
PLATEAU_FRACTION = 0.9


# --------------------------------------------------------------------------
# metrics


class MetricsRecord:
    """Per-step training metrics held as dense ``(episodes, steps, ...)`` arrays."""

    def __init__(self, episodes: int, steps: int, num_agents: int):
        self.episodes = episodes
        self.steps = steps
        self.num_agents = num_agents
        shape = (episodes, steps)
        self.reward = np.zeros(shape)
        self.capacity = np.zeros(shape)
        self.goodput = np.zeros(shape)
        self.gb_violations = np.zeros(shape, dtype=np.int64)
        self.flags = np.zeros(shape + (len(CONSTRAINT_NAMES),), dtype=bool)
        self.epsilon = np.zeros(shape)
        self.updated = np.zeros(shape, dtype=bool)
        self.loss = np.zeros(shape + (num_agents,))
        self.rates = np.zeros(shape + (num_agents,))
        self.actions = np.zeros(shape + (num_agents,), dtype=np.int64)
        self.completed_episodes = 0

    def record(self, ep: int, t: int, reward: float, outcome, epsilon: float, loss, actions) -> None:
        self.reward[ep, t] = reward
        self.capacity[ep, t] = outcome.cumulative_capacity
        self.goodput[ep, t] = outcome.goodput
        self.gb_violations[ep, t] = outcome.gb_violations
        self.flags[ep, t] = outcome.constraint_report.as_tuple()
        self.epsilon[ep, t] = epsilon
        if loss is not None:
            self.updated[ep, t] = True
            self.loss[ep, t] = loss
        self.rates[ep, t] = outcome.gf_rates
        self.actions[ep, t] = actions

    def episode_reward(self) -> np.ndarray:
        """Mean reward per completed episode."""
        return self.reward[: self.completed_episodes].mean(axis=1)

    def episode_goodput(self) -> np.ndarray:
        return self.goodput[: self.completed_episodes].mean(axis=1)

    def columns(self) -> list[str]:
        cols = ["episode", "step", "reward", "capacity", "goodput", "gb_violations"]
        cols += [f"ok_{name}" for name in CONSTRAINT_NAMES]
        cols += ["epsilon", "updated"]
        cols += [f"loss_{i}" for i in range(self.num_agents)]
        cols += [f"rate_{i}" for i in range(self.num_agents)]
        cols += [f"action_{i}" for i in range(self.num_agents)]
        return cols

    def rows(self):
        for ep in range(self.completed_episodes):
            for t in range(self.steps):
                yield [ep, t, self.reward[ep, t], self.capacity[ep, t], self.goodput[ep, t],
                       self.gb_violations[ep, t], *self.flags[ep, t].astype(int).tolist(),
                       self.epsilon[ep, t], int(self.updated[ep, t]),
                       *self.loss[ep, t].tolist(), *self.rates[ep, t].tolist(),
                       *self.actions[ep, t].tolist()]

    _ARRAYS = ("reward", "capacity", "goodput", "gb_violations", "flags", "epsilon", "updated",
               "loss", "rates", "actions")

    def state_dict(self) -> dict:
        out = {name: getattr(self, name).copy() for name in self._ARRAYS}
        out["completed_episodes"] = self.completed_episodes
        return out

    def load_state_dict(self, state: dict) -> None:
        for name in self._ARRAYS:
            getattr(self, name)[...] = state[name]
        self.completed_episodes = int(state["completed_episodes"])


def moving_average(values, window: int = MA_WINDOW) -> np.ndarray:
    """Trailing mean; entry k averages values[k-window+1 .. k] (only full windows)."""
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return np.empty(0)
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def plateau_episode(episode_values, window: int = MA_WINDOW, fraction: float = PLATEAU_FRACTION):
    """First episode whose trailing moving average reaches ``fraction`` of the final one.

    Returns ``None`` when the series is shorter than a window or the final
    moving average is not positive (no plateau to speak of).
    """
    ma = moving_average(episode_values, window)
    if len(ma) == 0 or ma[-1] <= 0:
        return None
    hit = np.flatnonzero(ma >= fraction * ma[-1])
    return int(hit[0]) + window - 1


def final_level(episode_values, window: int = MA_WINDOW) -> float:
    ma = moving_average(episode_values, window)
    return float(ma[-1]) if len(ma) else float(np.mean(episode_values))


# --------------------------------------------------------------------------
# training


class Trainer:
    """Runs the multi-agent learning loop; resumable at episode boundaries."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None, topology: CellState | None = None,
                 freeze_fading: bool = False):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else int(seed)
        net = cfg.network
        if topology is None:
            topology = sample_topology(net, make_rng(self.seed, "topology"), num_gf=cfg.num_agents)
        if topology.num_gf != cfg.num_agents:
            raise ValueError(f"topology has {topology.num_gf} GF users, config asks for {cfg.num_agents} agents")
        self.topology = topology
        self.env = SGFNomaEnv(net, topology, lambda ep: make_rng(self.seed, "fading", ep), freeze_fading)
        self.team = AgentTeam(cfg, cfg.num_agents, seed=self.seed) if cfg.num_agents else None
        self.schedule = EpsilonSchedule.from_config(cfg)
        self.metrics = MetricsRecord(cfg.episodes, cfg.steps_per_episode, cfg.num_agents)
        self.episode = 0
        self.global_step = 0
        log.info("training %s agents=%d seed=%d discount=%.3g episodes=%d steps=%d",
                 cfg.algorithm, cfg.num_agents, self.seed, cfg.discount, cfg.episodes,
                 cfg.steps_per_episode)

    def run_episode(self) -> None:
        cfg = self.cfg
        ep = self.episode
        n = cfg.num_agents
        state = self.env.reset(ep)
        for t in range(cfg.steps_per_episode):
            eps = self.schedule(self.global_step)
            obs = observe(state, n, cfg.observation)
            actions = self.team.act(obs, eps) if n else np.zeros(0, dtype=np.int64)
            previous = self.env.previous_capacity
            next_state, reward, outcome = self.env.step(actions)
            # harness-level cross-check of the reward gate
            if reward != slot_reward(outcome, previous):
                raise AssertionError("reward does not match the gated capacity")
            loss = None
            if n:
                self.team.store(obs, actions, reward, observe(next_state, n, cfg.observation))
                if self.team.ready():
                    loss = self.team.learn()
            self.metrics.record(ep, t, reward, outcome, eps, loss, actions)
            state = next_state
            self.global_step += 1
        self.episode += 1
        self.metrics.completed_episodes = self.episode

    def run(self, until_episode: int | None = None) -> "Trainer":
        stop = self.cfg.episodes if until_episode is None else min(until_episode, self.cfg.episodes)
        while self.episode < stop:
            self.run_episode()
            if self.episode % 50 == 0:
                r = self.metrics.episode_reward()
                log.info("episode %d mean reward (last 50) %.4f", self.episode, r[-50:].mean())
        return self

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "episode": self.episode,
            "global_step": self.global_step,
            "num_agents": self.cfg.num_agents,
            "topology": {
                "gb_distance": self.topology.gb_distance, "gb_channel": self.topology.gb_channel,
                "gf_distance": self.topology.gf_distance,
                "gb_fading": self.topology.gb_fading, "gf_fading": self.topology.gf_fading,
            },
            "team": self.team.state_dict() if self.team else None,
            "metrics": self.metrics.state_dict(),
        }

    @classmethod
    def from_state(cls, cfg: ExperimentConfig, state: dict, freeze_fading: bool = False) -> "Trainer":
        if int(state["num_agents"]) != cfg.num_agents:
            raise ValueError(f"checkpoint holds {state['num_agents']} agents, config asks for {cfg.num_agents}")
        topo = CellState(**state["topology"])
        trainer = cls(cfg, seed=int(state["seed"]), topology=topo, freeze_fading=freeze_fading)
        if trainer.team is not None:
            trainer.team.load_state_dict(state["team"])
        trainer.metrics.load_state_dict(state["metrics"])
        trainer.episode = int(state["episode"])
        trainer.global_step = int(state["global_step"])
        return trainer


@dataclass
class TrainingResult:
    cfg: ExperimentConfig
    seed: int
    team: AgentTeam | None
    metrics: MetricsRecord
    topology: CellState

    @property
    def episode_reward(self) -> np.ndarray:
        return self.metrics.episode_reward()

    @property
    def plateau(self):
        return plateau_episode(self.episode_reward)

    @property
    def final_reward(self) -> float:
        return final_level(self.episode_reward)


def run_training(cfg: ExperimentConfig, seed: int | None = None, topology: CellState | None = None,
                 freeze_fading: bool = False) -> TrainingResult:
    trainer = Trainer(cfg, seed, topology, freeze_fading).run()
    return TrainingResult(cfg, trainer.seed, trainer.team, trainer.metrics, trainer.topology)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationStream:
    """Per-slot record of a greedy (epsilon = 0) rollout."""

    config: NetworkConfig
    actions: np.ndarray
    rewards: np.ndarray
    capacity: np.ndarray
    goodput: np.ndarray
    gb_violations: np.ndarray
    flags: np.ndarray
    gf_rates: np.ndarray
    outcomes: list = field(default_factory=list, repr=False)

    @property
    def slots(self) -> int:
        return len(self.rewards)

    @property
    def joint_actions(self) -> list[JointAction]:
        return [JointAction.from_indices(a, self.config) for a in self.actions]

    def steps_to_settle(self, steps_per_episode: int) -> float:
        """Mean slot index after which the joint action stops changing within an episode."""
        acts = self.actions.reshape(-1, steps_per_episode, self.actions.shape[-1])
        out = []
        for ep in acts:
            change = np.flatnonzero(np.any(ep[1:] != ep[:-1], axis=1))
            out.append(0 if len(change) == 0 else int(change[-1]) + 1)
        return float(np.mean(out))


def run_greedy_evaluation(team: AgentTeam | None, cfg: ExperimentConfig, topology: CellState,
                          episodes: int | None = None, seed: int | None = None,
                          epsilon: float = 0.0, freeze_fading: bool = False,
                          keep_outcomes: bool = False) -> EvaluationStream:
    """Roll the team out with a fixed epsilon (0 by default) and no learning.

    Fading comes from the ``evaluation`` streams, so any two policies
    evaluated with the same seed see identical channel realizations.
    Exploration (when ``epsilon > 0``) uses a dedicated stream as well.
    """
    seed = cfg.seed if seed is None else int(seed)
    episodes = cfg.eval_episodes if episodes is None else episodes
    net = cfg.network
    n = topology.num_gf
    env = SGFNomaEnv(net, topology, lambda ep: make_rng(seed, "evaluation", ep), freeze_fading)
    explore = [make_rng(seed, "choices", 1_000 + i) for i in range(n)]
    rows = {k: [] for k in ("actions", "rewards", "capacity", "goodput", "gbv", "flags", "rates")}
    outcomes = []
    for ep in range(episodes):
        state = env.reset(ep)
        for _ in range(cfg.steps_per_episode):
            obs = observe(state, n, cfg.observation)
            if team is None:
                actions = np.zeros(n, dtype=np.int64)
            elif epsilon > 0:
                q = team.q_values(obs)
                actions = np.array([select_action(q[i], team.mask, epsilon, explore[i]) for i in range(n)])
            else:
                actions = team.greedy(obs)
            state, reward, outcome = env.step(actions)
            rows["actions"].append(actions)
            rows["rewards"].append(reward)
            rows["capacity"].append(outcome.cumulative_capacity)
            rows["goodput"].append(outcome.goodput)
            rows["gbv"].append(outcome.gb_violations)
            rows["flags"].append(outcome.constraint_report.as_tuple())
            rows["rates"].append(outcome.gf_rates)
            if keep_outcomes:
                outcomes.append(outcome)
    return EvaluationStream(
        config=net,
        actions=np.array(rows["actions"], dtype=np.int64).reshape(-1, n),
        rewards=np.array(rows["rewards"]),
        capacity=np.array(rows["capacity"]),
        goodput=np.array(rows["goodput"]),
        gb_violations=np.array(rows["gbv"]),
        flags=np.array(rows["flags"], dtype=bool),
        gf_rates=np.array(rows["rates"]).reshape(-1, n),
        outcomes=outcomes,
    )


# --------------------------------------------------------------------------
# sweeps


def level_grid(count: int, low: float = 0.1, high: float = 0.9) -> tuple[float, ...]:
    """``count`` evenly spaced levels on [low, high]; a single level sits at the midpoint."""
    if count < 1:
        raise ValueError("need at least one power level")
    if count == 1:
        return (round((low + high) / 2, 12),)
    return tuple(round(float(p), 12) for p in np.linspace(low, high, count))


@dataclass
class SweepRow:
    axis: str
    value: int
    seed: int
    plateau_episode: int | None
    final_reward: float
    eval_goodput: float
    eval_capacity: float
    num_actions: int
    num_agents: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _evaluate_row(axis, value, seed, result: TrainingResult, cfg: ExperimentConfig) -> SweepRow:
    if result.team is not None:
        ev = run_greedy_evaluation(result.team, cfg, result.topology, seed=seed)
        goodput, capacity = float(ev.goodput.mean()), float(ev.capacity.mean())
    else:
        goodput = capacity = 0.0
    return SweepRow(axis, value, seed, result.plateau, result.final_reward, goodput, capacity,
                    cfg.network.num_actions, cfg.num_agents)


def power_level_config(cfg: ExperimentConfig, count: int) -> ExperimentConfig:
    return cfg.replace(power_levels=level_grid(count))


def cluster_config(cfg: ExperimentConfig, gf_per_channel: int) -> ExperimentConfig:
    """Exactly ``gf_per_channel`` GF agents per sub-channel, with the cluster cap set to match."""
    m = cfg.network.num_subchannels
    return cfg.replace(num_agents=gf_per_channel * m, max_gf_per_channel=max(1, gf_per_channel))


def agent_count_config(cfg: ExperimentConfig, num_agents: int, relax_cluster_cap: bool = True
                       ) -> ExperimentConfig:
    changes = {"num_agents": num_agents}
    if relax_cluster_cap:
        m = cfg.network.num_subchannels
        changes["max_gf_per_channel"] = max(cfg.network.max_gf_per_channel, math.ceil(num_agents / m))
    return cfg.replace(**changes)


def _sweep(axis, values, make_cfg, cfg, seeds, runner):
    rows = []
    for value in values:
        sub = make_cfg(cfg, value)
        for seed in seeds:
            result = runner(sub, seed)
            rows.append(_evaluate_row(axis, value, seed, result, sub))
    return rows


def sweep_power_levels(cfg: ExperimentConfig, counts=None, seeds=None, runner=run_training) -> list[SweepRow]:
    counts = cfg.sweep_power_levels if counts is None else counts
    return _sweep("power_levels", counts, power_level_config, cfg, seeds or cfg.seeds, runner)


def sweep_cluster_size(cfg: ExperimentConfig, sizes=None, seeds=None, runner=run_training) -> list[SweepRow]:
    sizes = cfg.sweep_cluster_sizes if sizes is None else sizes
    return _sweep("gf_per_channel", sizes, cluster_config, cfg, seeds or cfg.seeds, runner)


def sweep_agent_count(cfg: ExperimentConfig, counts=None, seeds=None, relax_cluster_cap: bool = True,
                      runner=run_training) -> list[SweepRow]:
    counts = cfg.sweep_agent_counts if counts is None else counts
    make = lambda c, n: agent_count_config(c, n, relax_cluster_cap)  # noqa: E731
    return _sweep("num_agents", counts, make, cfg, seeds or cfg.seeds, runner)
