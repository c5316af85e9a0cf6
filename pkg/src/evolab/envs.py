"""Desk-scale CMDP environments with indicator costs.

All environments share one interface: ``reset(seed) -> obs`` and
``step(action) -> (obs, reward, cost, done)``. Each instance owns its RNG,
reseeded on every reset, so a (seed, action sequence) pair fully
determines a trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UsageError

DEFAULT_COST_LIMIT = 25.0


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_kind: str  # "discrete" | "continuous"
    max_episode_len: int
    cost_limit_default: float = DEFAULT_COST_LIMIT
    n_actions: int = 0
    action_dim: int = 0
    action_low: tuple = ()
    action_high: tuple = ()
    reward_bound: float = 1.0
    obs_low: tuple = ()
    obs_high: tuple = ()

    def __post_init__(self):
        if self.max_episode_len <= 0:
            raise InvalidInputError("max_episode_len must be positive")
        if self.action_kind == "continuous":
            if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
                raise InvalidInputError("action bounds need low < high")
        elif self.action_kind != "discrete":
            raise InvalidInputError(f"unknown action kind {self.action_kind!r}")


class Env:
    spec: EnvSpec

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.t = 0
        self._done = True

    def reset(self, seed: int = 0) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self._done = False
        self._reset()
        return self._obs()

    def step(self, action):
        if self._done:
            raise UsageError("step() called on a finished episode; call reset()")
        action = self._validate(action)
        reward, cost, terminal = self._step(action)
        self.t += 1
        done = terminal or self.t >= self.spec.max_episode_len
        self._done = done
        self.terminal = terminal
        return self._obs(), float(reward), float(cost), bool(done)

    def _validate(self, action):
        s = self.spec
        if s.action_kind == "discrete":
            if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
                try:
                    ok = np.ndim(action) == 0 and float(action).is_integer()
                except (TypeError, ValueError):
                    ok = False
                if not ok:
                    raise InvalidInputError(f"discrete action expected, got {action!r}")
            a = int(action)
            if not 0 <= a < s.n_actions:
                raise InvalidInputError(f"action {a} out of range [0, {s.n_actions})")
            return a
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (s.action_dim,) or not np.all(np.isfinite(a)):
            raise InvalidInputError(f"continuous action of shape ({s.action_dim},) expected")
        return np.clip(a, s.action_low, s.action_high)


class HazardGridworld(Env):
    """N x N grid with hazard cells and a goal.

    The hazard and goal layout is drawn from ``layout_seed`` at
    construction; the start cell is drawn on every reset, uniformly over the
    free cells of row 0. Reward per step is ``-shaping_weight * dist / D``
    (Manhattan distance to the goal normalised by its maximum ``D``) plus
    +1 on reaching the goal, which ends the episode. Standing on a hazard
    costs 1. With probability ``slip_prob`` the chosen move is replaced by a
    uniformly random one.

    ``shaping_offset`` is added inside the shaping term, giving
    ``shaping_weight * (shaping_offset - dist / D)``; a positive offset pays
    the agent for lingering near the goal.

    With ``goal_respawn`` the goal instead jumps to a random free cell when
    reached and the episode only ends at ``max_episode_len``, as in
    navigation benchmarks where the agent collects goals for a fixed time.
    """

    MOVES = np.array([(0, 1), (0, -1), (1, 0), (-1, 0)])  # (drow, dcol)

    def __init__(self, size: int = 8, n_hazards: int = 8, max_episode_len: int = 100,
                 shaping_weight: float = 1.0, slip_prob: float = 0.0, layout_seed: int = 0,
                 goal_respawn: bool = False, shaping_offset: float = 0.0):
        super().__init__()
        if size < 3 or n_hazards > size * (size - 1) - 1:
            raise InvalidInputError("grid too small for the requested hazards")
        self.size = size
        self.shaping_weight = shaping_weight
        self.slip_prob = slip_prob
        self.goal_respawn = goal_respawn
        self.shaping_offset = shaping_offset
        lay = np.random.default_rng(layout_seed)
        self.goal = self.first_goal = (size - 1, int(lay.integers(size)))
        cells = [(r, c) for r in range(1, size) for c in range(size) if (r, c) != self.goal]
        pick = lay.choice(len(cells), size=n_hazards, replace=False)
        self.hazards = frozenset(cells[i] for i in sorted(pick))
        self.start_cells = [(0, c) for c in range(size)]
        self.free_cells = [(r, c) for r in range(size) for c in range(size)
                           if (r, c) not in self.hazards]
        self.max_dist = 2 * (size - 1)
        self.spec = EnvSpec(
            observation_dim=10, action_kind="discrete", max_episode_len=max_episode_len,
            n_actions=4, reward_bound=1.0 + shaping_weight * (1.0 + abs(shaping_offset)),
            obs_low=(0.0, 0.0, -1.0, -1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0),
            obs_high=(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0))
        self.pos = self.start_cells[0]

    def initial_distribution(self) -> dict:
        p = 1.0 / len(self.start_cells)
        return {cell: p for cell in self.start_cells}

    def _reset(self):
        self.goal = self.first_goal
        self.pos = self.start_cells[int(self.rng.integers(len(self.start_cells)))]

    def _dist(self, cell):
        return abs(cell[0] - self.goal[0]) + abs(cell[1] - self.goal[1])

    def _obs(self):
        n1 = self.size - 1
        r, c = self.pos
        near = min(self.hazards, key=lambda h: (abs(h[0] - r) + abs(h[1] - c), h))
        flags = [float((r + dr, c + dc) in self.hazards) for dr, dc in self.MOVES]
        return np.array([r / n1, c / n1, (self.goal[0] - r) / n1, (self.goal[1] - c) / n1,
                         (near[0] - r) / n1, (near[1] - c) / n1, *flags])

    def _step(self, action):
        if self.slip_prob > 0 and self.rng.random() < self.slip_prob:
            action = int(self.rng.integers(4))
        dr, dc = self.MOVES[action]
        r = min(max(self.pos[0] + dr, 0), self.size - 1)
        c = min(max(self.pos[1] + dc, 0), self.size - 1)
        self.pos = (int(r), int(c))
        cost = 1.0 if self.pos in self.hazards else 0.0
        if self.pos == self.goal:
            if not self.goal_respawn:
                return 1.0, cost, True
            while self.goal == self.pos:
                self.goal = self.free_cells[int(self.rng.integers(len(self.free_cells)))]
            return 1.0, cost, False
        shaped = self.shaping_offset - self._dist(self.pos) / self.max_dist
        return self.shaping_weight * shaped, cost, False


class PointCircle(Env):
    """2-D point with velocity actions, rewarded for circling the origin.

    Reward is the counter-clockwise tangential speed divided by
    ``1 + |radius - circle_radius|``. Cost 1 whenever ``|x|`` exceeds
    ``x_limit``.
    """

    def __init__(self, max_episode_len: int = 200, circle_radius: float = 1.0,
                 x_limit: float = 0.7, dt: float = 0.1, arena: float = 2.0):
        super().__init__()
        self.circle_radius, self.x_limit, self.dt, self.arena = circle_radius, x_limit, dt, arena
        vmax = 1.0
        self.spec = EnvSpec(
            observation_dim=4, action_kind="continuous", max_episode_len=max_episode_len,
            action_dim=2, action_low=(-vmax, -vmax), action_high=(vmax, vmax),
            reward_bound=math.sqrt(2.0) * vmax,
            obs_low=(-arena, -arena, -vmax, -vmax), obs_high=(arena, arena, vmax, vmax))
        self.p = np.zeros(2)
        self.v = np.zeros(2)

    def _reset(self):
        self.p = self.rng.uniform(-0.1, 0.1, size=2)
        self.v = np.zeros(2)

    def _obs(self):
        return np.concatenate([self.p, self.v])

    def _step(self, action):
        self.v = np.asarray(action, dtype=float)
        self.p = np.clip(self.p + self.dt * self.v, -self.arena, self.arena)
        x, y = self.p
        rad = math.hypot(x, y)
        tangential = (x * self.v[1] - y * self.v[0]) / max(rad, 1e-8)
        reward = tangential / (1.0 + abs(rad - self.circle_radius))
        cost = 1.0 if abs(x) > self.x_limit else 0.0
        return reward, cost, False


class VelocityChain(Env):
    """1-D chain where the action is the commanded velocity.

    Reward is the realised forward velocity; cost 1 when the speed exceeds
    ``velocity_limit``. Small Gaussian actuation noise is added to the
    position update only.
    """

    def __init__(self, max_episode_len: int = 200, velocity_limit: float = 0.5,
                 v_max: float = 1.0, dt: float = 0.05, noise: float = 0.01):
        super().__init__()
        self.velocity_limit, self.dt, self.noise = velocity_limit, dt, noise
        self.spec = EnvSpec(
            observation_dim=2, action_kind="continuous", max_episode_len=max_episode_len,
            action_dim=1, action_low=(-v_max,), action_high=(v_max,), reward_bound=v_max,
            obs_low=(-math.inf, -v_max), obs_high=(math.inf, v_max))
        self.x_scale = max_episode_len * dt * v_max
        self.x = 0.0
        self.v = 0.0

    def _reset(self):
        self.x = float(self.rng.uniform(-0.05, 0.05))
        self.v = 0.0

    def _obs(self):
        return np.array([self.x / self.x_scale, self.v])

    def _step(self, action):
        self.v = float(action[0])
        self.x += self.dt * self.v + self.noise * self.dt * float(self.rng.standard_normal())
        cost = 1.0 if abs(self.v) > self.velocity_limit else 0.0
        return self.v, cost, False


ENV_IDS = {
    "hazard-grid": HazardGridworld,
    "point-circle": PointCircle,
    "velocity-chain": VelocityChain,
}


def make_env(env_id: str, **kwargs) -> Env:
    try:
        cls = ENV_IDS[env_id]
    except KeyError:
        raise InvalidInputError(f"unknown env id {env_id!r}; choose from {sorted(ENV_IDS)}") from None
    return cls(**kwargs)


def env_reset(env: Env, seed: int) -> np.ndarray:
    return env.reset(seed)


def env_step(env: Env, action):
    return env.step(action)
