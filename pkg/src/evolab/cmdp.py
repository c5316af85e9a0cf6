"""CMDP data model: step records, trajectories, returns and GAE."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class StepRecord:
    state: np.ndarray
    action: object
    reward: float
    cost: float
    log_prob: float
    done: bool = False

    def __post_init__(self):
        if not self.cost >= 0:
            raise InvalidInputError(f"cost must be >= 0, got {self.cost}")
        if not np.isfinite(self.log_prob):
            raise InvalidInputError("log_prob must be finite")


@dataclass
class Trajectory:
    """One episode. Only the last step may carry ``done=True``.

    ``bootstrap_value`` is the value estimate of the state after the last
    step; it is used only when the episode was truncated (not done).
    """

    steps: list[StepRecord]
    bootstrap_value: float = 0.0
    final_state: np.ndarray | None = None

    def __post_init__(self):
        if not self.steps:
            raise InvalidInputError("trajectory must be non-empty")
        if any(s.done for s in self.steps[:-1]):
            raise InvalidInputError("only the final step may be terminal")

    def __len__(self):
        return len(self.steps)

    @property
    def done(self) -> bool:
        return self.steps[-1].done

    @property
    def states(self) -> np.ndarray:
        return np.asarray([s.state for s in self.steps], dtype=float)

    @property
    def actions(self) -> np.ndarray:
        return np.asarray([s.action for s in self.steps])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=float)

    @property
    def costs(self) -> np.ndarray:
        return np.array([s.cost for s in self.steps], dtype=float)

    @property
    def log_probs(self) -> np.ndarray:
        return np.array([s.log_prob for s in self.steps], dtype=float)

    def channel(self, name: str) -> np.ndarray:
        if name == "reward":
            return self.rewards
        if name == "cost":
            return self.costs
        raise InvalidInputError(f"unknown channel {name!r}")


@dataclass
class ProcessedBatch:
    """Flat per-step arrays for a batch of trajectories."""

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    reward_advantages: np.ndarray
    cost_advantages: np.ndarray
    reward_returns: np.ndarray
    cost_returns: np.ndarray
    cumulative_costs: np.ndarray
    episode_returns: np.ndarray
    traj_index: np.ndarray
    gamma: float
    gae_lambda: float
    raw_reward_advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "log_probs", "reward_advantages", "cost_advantages",
                     "reward_returns", "cost_returns", "traj_index"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} length does not match step count {n}")
        if len(self.cumulative_costs) != len(self.episode_returns):
            raise InvalidInputError("one cumulative cost per trajectory required")
        if self.raw_reward_advantages is None:
            self.raw_reward_advantages = self.reward_advantages

    @property
    def n_steps(self) -> int:
        return len(self.states)

    @property
    def n_trajectories(self) -> int:
        return len(self.cumulative_costs)


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of ``gamma**t * rewards[t]``."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise InvalidInputError("rewards must be a non-empty 1-D sequence")
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"gamma must lie in (0, 1], got {gamma}")
    return float(np.dot(gamma ** np.arange(r.size), r))


def cumulative_cost(trajectory: Trajectory, gamma: float) -> float:
    return discounted_return(trajectory.costs, gamma)


def gae_advantages(
    trajectory: Trajectory,
    values: Sequence[float],
    gamma: float,
    lam: float,
    channel: str = "reward",
) -> np.ndarray:
    """Generalized advantage estimates for one channel of a trajectory.

    ``values`` holds V(s_0..s_T) and must have ``len(trajectory) + 1``
    entries; the last one is the bootstrap value (0 for terminal episodes).
    """
    signal = trajectory.channel(channel)
    v = np.asarray(values, dtype=float)
    if v.shape != (len(signal) + 1,):
        raise InvalidInputError(
            f"values must have length {len(signal) + 1}, got {v.shape}")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError("lam must lie in [0, 1]")
    deltas = signal + gamma * v[1:] - v[:-1]
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def normalize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return x - x.mean() if x.size else x
    return (x - x.mean()) / (x.std() + eps)


def process_trajectories(
    trajectories: Sequence[Trajectory],
    reward_values: Sequence[np.ndarray],
    cost_values: Sequence[np.ndarray],
    gamma: float,
    gae_lambda: float,
) -> ProcessedBatch:
    """Turn trajectories plus value predictions into a ProcessedBatch.

    ``reward_values[i]`` / ``cost_values[i]`` have ``len(traj_i) + 1``
    entries with the bootstrap value last. Reward advantages are normalized
    over the batch; cost advantages keep their scale.
    """
    if not trajectories:
        raise InvalidInputError("no trajectories")
    adv_r, adv_c, ret_r, ret_c, idx = [], [], [], [], []
    costs, ep_returns = [], []
    for i, (traj, vr, vc) in enumerate(zip(trajectories, reward_values, cost_values)):
        vr = np.array(vr, dtype=float)
        vc = np.array(vc, dtype=float)
        if traj.done:
            vr[-1] = 0.0
            vc[-1] = 0.0
        ar = gae_advantages(traj, vr, gamma, gae_lambda, "reward")
        ac = gae_advantages(traj, vc, gamma, gae_lambda, "cost")
        adv_r.append(ar)
        adv_c.append(ac)
        ret_r.append(ar + vr[:-1])
        ret_c.append(ac + vc[:-1])
        idx.append(np.full(len(traj), i))
        costs.append(cumulative_cost(traj, gamma))
        ep_returns.append(float(traj.rewards.sum()))
    raw = np.concatenate(adv_r)
    return ProcessedBatch(
        states=np.concatenate([t.states for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        log_probs=np.concatenate([t.log_probs for t in trajectories]),
        reward_advantages=normalize(raw),
        cost_advantages=np.concatenate(adv_c),
        reward_returns=np.concatenate(ret_r),
        cost_returns=np.concatenate(ret_c),
        cumulative_costs=np.array(costs),
        episode_returns=np.array(ep_returns),
        traj_index=np.concatenate(idx),
        gamma=gamma,
        gae_lambda=gae_lambda,
        raw_reward_advantages=raw,
    )
