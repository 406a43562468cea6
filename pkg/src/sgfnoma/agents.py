"""Independent DDQN / dueling-DDQN agents sharing one team reward.

The N agents are held as one member-stacked :class:`~sgfnoma.nn.QNetwork`
so a training step is a handful of batched matrix products.  Stacking is a
storage layout only: member ``i``'s parameters, optimizer moments, replay
memory and random streams are read and written using member ``i``'s data
alone, so agents stay fully independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig, NetworkConfig
from .nn import Adam, QNetwork, clip_by_norm
from .seeding import make_rng


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps``, flat afterwards."""

    start: float = 1.0
    end: float = 0.01
    decay_steps: int = 40_000

    def __call__(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.end
        frac = step / self.decay_steps
        return max(self.end, self.start + (self.end - self.start) * frac)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "EpsilonSchedule":
        horizon = max(1, int(round(cfg.epsilon_decay_fraction * cfg.total_steps)))
        return cls(cfg.epsilon_start, cfg.epsilon_end, horizon)


class ReplayBuffer:
    """Ring buffer of transitions, one independent ring per member."""

    def __init__(self, capacity: int, obs_dim: int, members: int = 1, dtype=np.float64):
        self.capacity = int(capacity)
        self.members = int(members)
        self.obs_dim = int(obs_dim)
        self.states = np.zeros((members, capacity, obs_dim), dtype=dtype)
        self.next_states = np.zeros((members, capacity, obs_dim), dtype=dtype)
        self.actions = np.zeros((members, capacity), dtype=np.int64)
        self.rewards = np.zeros((members, capacity), dtype=dtype)
        self.cursor = 0
        self.size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, states, actions, rewards, next_states) -> None:
        """Store one transition per member (``states`` is ``(members, obs_dim)``)."""
        i = self.cursor
        self.states[:, i] = np.reshape(states, (self.members, self.obs_dim))
        self.next_states[:, i] = np.reshape(next_states, (self.members, self.obs_dim))
        self.actions[:, i] = actions
        self.rewards[:, i] = rewards
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def push(self, transition: Transition) -> None:
        """Single-member convenience wrapper around :meth:`add`."""
        self.add(transition.state, transition.action, transition.reward, transition.next_state)

    def sample_indices(self, batch_size: int, rngs) -> np.ndarray:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        return np.stack([rng.choice(self.size, batch_size, replace=False) for rng in rngs])

    def gather(self, idx: np.ndarray):
        rows = np.arange(self.members)[:, None]
        return (self.states[rows, idx], self.actions[rows, idx],
                self.rewards[rows, idx], self.next_states[rows, idx])

    def sample(self, batch_size: int, rngs):
        """Uniform minibatch without replacement, drawn per member from its own stream."""
        return self.gather(self.sample_indices(batch_size, rngs))

    def ordered(self, member: int = 0) -> list[Transition]:
        """Stored transitions of one member, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        out = []
        for k in range(self.size):
            i = (start + k) % self.capacity
            out.append(Transition(self.states[member, i].copy(), int(self.actions[member, i]),
                                  float(self.rewards[member, i]), self.next_states[member, i].copy()))
        return out

    def state_dict(self) -> dict:
        return {
            "states": self.states, "next_states": self.next_states, "actions": self.actions,
            "rewards": self.rewards, "cursor": self.cursor, "size": self.size, "inserted": self.inserted,
        }

    def load_state_dict(self, state: dict) -> None:
        if np.shape(state["states"]) != self.states.shape:
            raise ValueError("replay buffer shape mismatch")
        self.states[...] = state["states"]
        self.next_states[...] = state["next_states"]
        self.actions[...] = state["actions"]
        self.rewards[...] = state["rewards"]
        self.cursor = int(state["cursor"])
        self.size = int(state["size"])
        self.inserted = int(state["inserted"])


# --------------------------------------------------------------------------
# action selection and targets


def build_action_mask(config: NetworkConfig, agent: int | None = None) -> np.ndarray:
    """Valid actions: every (channel, level) pair whose level respects the per-user cap.

    The mask is the same for every agent; ``agent`` is accepted so callers
    can ask per agent.
    """
    level_ok = np.asarray(config.power_levels) <= config.max_user_power
    mask = np.tile(level_ok, config.num_subchannels)
    if config.allow_idle:
        mask = np.append(mask, True)
    if not mask.any():
        raise ConfigError("invalid value for 'max_user_power': every power level exceeds it")
    return mask


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over valid actions along the last axis; ties go to the lowest index."""
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


def select_action(q_values, mask, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice restricted to the valid actions.

    Two draws are taken on every call (explore coin, uniform index) so the
    stream position does not depend on the outcome.
    """
    valid = np.flatnonzero(mask)
    coin = rng.random()
    pick = valid[rng.integers(len(valid))]
    if coin < epsilon:
        return int(pick)
    return int(masked_argmax(np.asarray(q_values), mask))


def ddqn_target(rewards, next_q_primary, next_q_target, beta: float, mask=None) -> np.ndarray:
    """Double-Q target: the primary net picks the action, the target net scores it."""
    next_q_primary = np.asarray(next_q_primary)
    mask = np.ones(next_q_primary.shape[-1], dtype=bool) if mask is None else mask
    best = masked_argmax(next_q_primary, mask)
    score = np.take_along_axis(np.asarray(next_q_target), best[..., None], axis=-1)[..., 0]
    return np.asarray(rewards) + beta * score


def dqn_target(rewards, next_q, beta: float, mask=None) -> np.ndarray:
    """Single-network target r + beta * max_a Q(s', a) (reference for tests)."""
    next_q = np.asarray(next_q)
    mask = np.ones(next_q.shape[-1], dtype=bool) if mask is None else mask
    return np.asarray(rewards) + beta * np.max(np.where(mask, next_q, -np.inf), axis=-1)


def sync_target(primary: QNetwork, target: QNetwork, step_counter: int, period: int) -> bool:
    """Copy primary into target when ``step_counter`` is a positive multiple of ``period``."""
    if step_counter > 0 and step_counter % period == 0:
        target.copy_from(primary)
        return True
    return False


def train_step(primary: QNetwork, target: QNetwork, optimizer: Adam, batch, beta: float,
               mask=None, grad_clip: float | None = None) -> np.ndarray:
    """One DDQN update of ``primary`` on ``batch``; returns per-member loss.

    ``batch`` is ``(states, actions, rewards, next_states)`` stacked by
    member.  The target network is only read.
    """
    states, actions, rewards, next_states = batch
    y = ddqn_target(rewards, primary.forward(next_states), target.forward(next_states), beta, mask)
    loss, grads = primary.loss_and_grad(states, actions, y)
    if not np.all(np.isfinite(loss)):
        raise FloatingPointError(f"non-finite loss {loss}")
    if grad_clip is not None:
        grads = clip_by_norm(grads, grad_clip)
    optimizer.step(primary.params, grads)
    return loss


def observe(global_state: np.ndarray, num_agents: int, mode: str = "global") -> np.ndarray:
    """Per-agent observations of the broadcast rate vector.

    ``global``: every agent sees the same vector.  ``own_first``: agent i's
    copy is rotated so its own rate comes first.
    """
    s = np.asarray(global_state)
    if mode == "global":
        return np.broadcast_to(s, (num_agents, s.shape[-1]))
    if mode == "own_first":
        idx = (np.arange(num_agents)[:, None] + np.arange(s.shape[-1])[None, :]) % s.shape[-1]
        return s[idx]
    raise ValueError(f"unknown observation mode {mode!r}")


# --------------------------------------------------------------------------
# the team


class AgentTeam:
    """N independent learners with primary/target networks, Adam and replay each."""

    def __init__(self, cfg: ExperimentConfig, num_agents: int, obs_dim: int | None = None,
                 seed: int | None = None, network: NetworkConfig | None = None):
        if num_agents < 1:
            raise ConfigError("invalid value for 'num_agents': a team needs at least one agent")
        self.cfg = cfg
        self.net_cfg = network or cfg.network
        self.num_agents = int(num_agents)
        self.obs_dim = int(obs_dim if obs_dim is not None else num_agents)
        self.seed = cfg.seed if seed is None else int(seed)
        self.mask = build_action_mask(self.net_cfg)
        self.n_actions = len(self.mask)
        self.dtype = np.dtype(cfg.dtype)
        head = "dueling" if cfg.algorithm == "dueling" else "plain"
        self.primary = QNetwork(self.obs_dim, self.n_actions, cfg.hidden, head, self.num_agents,
                                dtype=self.dtype)
        for i in range(self.num_agents):
            self.primary.init_params(make_rng(self.seed, "agent_init", i), member=i)
        self.target = self.primary.clone()
        self.optimizer = Adam(self.primary.params.shape, cfg.learning_rate, cfg.adam_beta1,
                              cfg.adam_beta2, cfg.adam_eps, dtype=self.dtype)
        self.buffer = ReplayBuffer(cfg.replay_capacity, self.obs_dim, self.num_agents, self.dtype)
        self.explore_rngs = [make_rng(self.seed, "explore", i) for i in range(self.num_agents)]
        self.replay_rngs = [make_rng(self.seed, "replay", i) for i in range(self.num_agents)]
        self.train_steps = 0

    def q_values(self, observations) -> np.ndarray:
        obs = np.asarray(observations, dtype=self.dtype).reshape(self.num_agents, 1, self.obs_dim)
        return self.primary.forward(obs)[:, 0]

    def act(self, observations, epsilon: float) -> np.ndarray:
        q = self.q_values(observations)
        return np.array([select_action(q[i], self.mask, epsilon, self.explore_rngs[i])
                         for i in range(self.num_agents)], dtype=np.int64)

    def greedy(self, observations) -> np.ndarray:
        return masked_argmax(self.q_values(observations), self.mask)

    def store(self, observations, actions, reward, next_observations) -> None:
        self.buffer.add(observations, actions, reward, next_observations)

    def ready(self) -> bool:
        return self.buffer.size >= self.cfg.batch_size

    def learn(self) -> np.ndarray:
        """Sample, update every agent once and sync targets on schedule."""
        batch = self.buffer.sample(self.cfg.batch_size, self.replay_rngs)
        loss = train_step(self.primary, self.target, self.optimizer, batch, self.cfg.discount,
                          self.mask, self.cfg.grad_clip)
        self.train_steps += 1
        sync_target(self.primary, self.target, self.train_steps, self.cfg.target_update)
        return loss

    # -- persistence -------------------------------------------------------

    def architecture(self) -> dict:
        return {**self.primary.architecture(), "num_agents": self.num_agents}

    def state_dict(self, include_buffer: bool = True) -> dict:
        out = {
            "architecture": self.architecture(),
            "primary": self.primary.params.copy(),
            "target": self.target.params.copy(),
            "optimizer": self.optimizer.state_dict(),
            "train_steps": self.train_steps,
            "explore_rngs": [r.bit_generator.state for r in self.explore_rngs],
            "replay_rngs": [r.bit_generator.state for r in self.replay_rngs],
        }
        if include_buffer:
            out["buffer"] = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.buffer.state_dict().items()}
        return out

    def load_state_dict(self, state: dict) -> None:
        arch = state["architecture"]
        if arch != self.architecture():
            raise ValueError(f"checkpoint architecture {arch} does not match team {self.architecture()}")
        self.primary.params[...] = state["primary"]
        self.target.params[...] = state["target"]
        self.optimizer.load_state_dict(state["optimizer"])
        self.train_steps = int(state["train_steps"])
        for r, s in zip(self.explore_rngs, state["explore_rngs"]):
            r.bit_generator.state = s
        for r, s in zip(self.replay_rngs, state["replay_rngs"]):
            r.bit_generator.state = s
        if "buffer" in state:
            self.buffer.load_state_dict(state["buffer"])
