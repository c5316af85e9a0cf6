"""Replay buffer with extreme prioritization and importance resampling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .evt import TailModel, gpd_support_cdf

P_FLOOR = 1e-3
CLIP_BOUNDS = (0.1, 10.0)
RATIO_MODES = ("literal", "product")


@dataclass(frozen=True)
class ReplayEntry:
    state: np.ndarray
    action: object
    reward_advantage: float
    trajectory_cost: float
    log_prob_old: float
    epoch_id: int
    priority: float = P_FLOOR
    traj_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.log_prob_old):
            raise InvalidInputError("log_prob_old must be finite")
        if not self.priority >= 0:
            raise InvalidInputError("priority must be nonnegative")


class ReplayBuffer:
    """Bounded FIFO of ReplayEntry with a running priority sum.

    The running sum is refreshed from scratch every ``resync_every``
    mutations to keep floating-point drift bounded.
    """

    def __init__(self, capacity: int = 50_000, resync_every: int = 1000):
        if capacity <= 0:
            raise InvalidInputError("capacity must be positive")
        self.capacity = capacity
        self.resync_every = resync_every
        self._entries: deque[ReplayEntry] = deque()
        self._sum = 0.0
        self._mutations = 0

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    @property
    def entries(self) -> list[ReplayEntry]:
        return list(self._entries)

    @property
    def priority_sum(self) -> float:
        return self._sum

    @property
    def priorities(self) -> np.ndarray:
        return np.fromiter((e.priority for e in self._entries), float, len(self._entries))

    def _touch(self):
        self._mutations += 1
        if self._mutations % self.resync_every == 0:
            self.resync()

    def resync(self):
        self._sum = float(self.priorities.sum())

    def add(self, entry: ReplayEntry):
        if len(self._entries) == self.capacity:
            old = self._entries.popleft()
            self._sum -= old.priority
        self._entries.append(entry)
        self._sum += entry.priority
        self._touch()

    def extend(self, entries: Iterable[ReplayEntry]):
        for e in entries:
            self.add(e)

    def set_priorities(self, priorities: Sequence[float]):
        p = np.asarray(priorities, dtype=float)
        if p.shape != (len(self),):
            raise InvalidInputError("one priority per entry required")
        if np.any(p < 0):
            raise InvalidInputError("priorities must be nonnegative")
        self._entries = deque(replace(e, priority=float(v)) for e, v in zip(self._entries, p))
        self.resync()

    def evict_older_than(self, current_epoch: int, max_age: int) -> int:
        """Drop entries whose epoch is more than ``max_age`` epochs old."""
        keep = deque(e for e in self._entries if current_epoch - e.epoch_id <= max_age)
        dropped = len(self._entries) - len(keep)
        self._entries = keep
        self.resync()
        return dropped

    def snapshot(self) -> tuple[ReplayEntry, ...]:
        return tuple(self._entries)


def _clipped_ratio(log_ratio, bounds):
    lo, hi = bounds
    # clip in log space first so exp never overflows
    return np.clip(np.exp(np.clip(log_ratio, np.log(lo), np.log(hi))), lo, hi)


def importance_reweigh(
    entry: ReplayEntry,
    current_policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    trajectory: Sequence[ReplayEntry] | None = None,
    mode: str = "product",
    clip: tuple[float, float] = CLIP_BOUNDS,
) -> tuple[float, float]:
    """Importance-weighted (A_R, C) of a stored entry under the current policy.

    ``current_policy(states, actions)`` returns log-probabilities. A_R uses
    the single-step ratio. In ``product`` mode C is weighted by the clipped
    product of per-step ratios over ``trajectory`` (the stored steps of the
    entry's source episode); in ``literal`` mode by the single-step ratio.
    """
    if mode not in RATIO_MODES:
        raise InvalidInputError(f"mode must be one of {RATIO_MODES}")
    logp = float(np.asarray(current_policy(np.asarray([entry.state]),
                                           np.asarray([entry.action])))[0])
    step_log_ratio = logp - entry.log_prob_old
    w = float(_clipped_ratio(step_log_ratio, clip))
    if mode == "literal" or trajectory is None:
        big_w = w
    else:
        states = np.asarray([e.state for e in trajectory])
        actions = np.asarray([e.action for e in trajectory])
        old = np.array([e.log_prob_old for e in trajectory])
        traj_log_ratio = float(np.sum(np.asarray(current_policy(states, actions)) - old))
        big_w = float(_clipped_ratio(traj_log_ratio, clip))
    return w * entry.reward_advantage, big_w * entry.trajectory_cost


def reweigh_entries(
    entries: Sequence[ReplayEntry],
    current_policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    mode: str = "product",
    clip: tuple[float, float] = CLIP_BOUNDS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised importance_reweigh over many entries.

    Returns adjusted A_R per entry, and the adjusted trajectory costs with
    the matching ``(epoch_id, traj_id)`` keys, one per source trajectory.
    """
    if mode not in RATIO_MODES:
        raise InvalidInputError(f"mode must be one of {RATIO_MODES}")
    if not entries:
        return np.zeros(0), np.zeros(0), np.zeros((0, 2), dtype=int)
    states = np.asarray([e.state for e in entries])
    actions = np.asarray([e.action for e in entries])
    old = np.array([e.log_prob_old for e in entries])
    log_ratio = np.asarray(current_policy(states, actions), dtype=float) - old
    w = _clipped_ratio(log_ratio, clip)
    adv = w * np.array([e.reward_advantage for e in entries])

    keys = np.array([(e.epoch_id, e.traj_id) for e in entries], dtype=np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    costs = np.array([entries[i].trajectory_cost for i in first])
    if mode == "product":
        traj_log_ratio = np.bincount(inverse, weights=log_ratio, minlength=len(uniq))
        big_w = _clipped_ratio(traj_log_ratio, clip)
    else:
        # single-step ratio of the first stored step of each trajectory
        big_w = w[first]
    return adv, big_w * costs, uniq


def priority(entry: ReplayEntry, model: TailModel, p_floor: float = P_FLOOR) -> float:
    """Sum of the entry's quantile levels under the reward and cost GPDs."""
    return float(priorities(np.array([entry.reward_advantage]),
                            np.array([entry.trajectory_cost]), model, p_floor)[0])


def priorities(reward_advantages: np.ndarray, trajectory_costs: np.ndarray,
               model: TailModel, p_floor: float = P_FLOOR) -> np.ndarray:
    a = np.asarray(reward_advantages, dtype=float)
    c = np.asarray(trajectory_costs, dtype=float)
    fr = gpd_support_cdf(model.reward_gpd)
    fc = gpd_support_cdf(model.cost_gpd)
    omega_r = np.where(a > model.reward_boundary, fr(np.maximum(a - model.reward_boundary, 0.0)), 0.0)
    omega_c = np.where(c > model.safety_boundary, fc(np.maximum(c - model.safety_boundary, 0.0)), 0.0)
    return np.maximum(omega_r + omega_c, p_floor)


def replay_probabilities(buffer, indices: Sequence[int] | None = None) -> np.ndarray:
    """Replay distribution proportional to priority.

    ``buffer`` may be a ReplayBuffer or a plain priority array; ``indices``
    restricts the distribution to a subset of entries.
    """
    p = buffer.priorities if isinstance(buffer, ReplayBuffer) else np.asarray(buffer, dtype=float)
    if indices is not None:
        p = p[np.asarray(indices, dtype=int)]
    if p.size == 0:
        raise InvalidInputError("buffer is empty")
    if np.any(p < 0):
        raise InvalidInputError("priorities must be nonnegative")
    total = p.sum()
    if total <= 0:
        raise InvalidInputError("priorities sum to zero")
    probs = p / total
    return probs / probs.sum()


def sample_indices(probs: np.ndarray, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    if batch_size <= 0:
        raise InvalidInputError("batch_size must be positive")
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(batch_size), side="right")


def sample_batch(buffer, rng: np.random.Generator, batch_size: int,
                 indices: Sequence[int] | None = None) -> list[ReplayEntry]:
    """Draw ``batch_size`` entries with replacement by replay probability."""
    if batch_size <= 0:
        raise InvalidInputError("batch_size must be positive")
    probs = replay_probabilities(buffer, indices)
    picks = sample_indices(probs, rng, batch_size)
    if indices is not None:
        picks = np.asarray(indices, dtype=int)[picks]
    return [buffer[int(i)] for i in picks]
