import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from evolab.envs import (
    ENV_IDS,
    EnvSpec,
    HazardGridworld,
    PointCircle,
    VelocityChain,
    env_reset,
    env_step,
    make_env,
)
from evolab.errors import InvalidInputError, UsageError


def random_action(env, rng):
    s = env.spec
    if s.action_kind == "discrete":
        return int(rng.integers(s.n_actions))
    return rng.uniform(-1.5, 1.5, s.action_dim)


def run(env, seed, actions):
    obs = [env_reset(env, seed)]
    out = []
    for a in actions:
        o, r, c, d = env_step(env, a)
        obs.append(o)
        out.append((r, c, d))
        if d:
            break
    return np.array(obs), out


def test_env_spec_invariants():
    with pytest.raises(InvalidInputError):
        EnvSpec(2, "discrete", 0)
    with pytest.raises(InvalidInputError):
        EnvSpec(2, "continuous", 5, action_dim=1, action_low=(1.0,), action_high=(0.0,))
    with pytest.raises(InvalidInputError):
        EnvSpec(2, "teleport", 5)


def test_make_env_ids():
    for name in ENV_IDS:
        assert make_env(name).spec.cost_limit_default == 25.0
    with pytest.raises(InvalidInputError):
        make_env("nope")


def test_hazard_reset_deterministic():
    env = HazardGridworld(layout_seed=7)
    a = env_reset(env, 7)
    b = env_reset(env, 7)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name", sorted(ENV_IDS))
def test_same_seed_and_actions_identical(name):
    rng = np.random.default_rng(3)
    env = make_env(name)
    acts = [random_action(env, rng) for _ in range(60)]
    o1, t1 = run(env, 11, acts)
    o2, t2 = run(make_env(name), 11, acts)
    assert np.array_equal(o1, o2) and t1 == t2


@pytest.mark.parametrize("name", sorted(ENV_IDS))
def test_costs_indicator_rewards_bounded_length_capped(name):
    rng = np.random.default_rng(5)
    env = make_env(name, max_episode_len=30)
    for ep in range(5):
        env_reset(env, ep)
        n = 0
        done = False
        while not done:
            _, r, c, done = env_step(env, random_action(env, rng))
            n += 1
            assert c in (0.0, 1.0)
            assert abs(r) <= env.spec.reward_bound + 1e-12
        assert n <= 30


def test_point_circle_reset_within_bounds():
    env = PointCircle()
    for s in range(20):
        o = env_reset(env, s)
        assert np.all(o >= env.spec.obs_low) and np.all(o <= env.spec.obs_high)


def test_hazard_start_distribution_chi_square():
    env = HazardGridworld()
    dist = env.initial_distribution()
    cells = list(dist)
    counts = np.zeros(len(cells))
    for s in range(100):
        env_reset(env, s)
        counts[cells.index(env.pos)] += 1
    expected = 100 * np.array([dist[c] for c in cells])
    assert chisquare(counts, expected).pvalue > 0.01


def _walk_to(env, target):
    """Greedy moves from the current position toward ``target``."""
    moves = {(0, 1): 0, (0, -1): 1, (1, 0): 2, (-1, 0): 3}
    r, c = env.pos
    tr, tc = target
    if r != tr:
        return moves[(int(np.sign(tr - r)), 0)]
    return moves[(0, int(np.sign(tc - c)))]


def test_hazard_cost_on_hazard_cell():
    env = HazardGridworld(n_hazards=8, layout_seed=1)
    env_reset(env, 0)
    hz = min(env.hazards)
    # place the agent next to a hazard and step onto it
    env.pos = (hz[0] - 1, hz[1])
    _, _, c, _ = env_step(env, 2)
    assert env.pos == hz and c == 1.0


def test_hazard_goal_is_terminal_with_reward_one():
    env = HazardGridworld()
    env_reset(env, 0)
    g = env.goal
    env.pos = (g[0] - 1, g[1])
    _, r, _, d = env_step(env, 2)
    assert r == 1.0 and d and env.terminal


def test_hazard_goal_respawn_keeps_running():
    env = HazardGridworld(goal_respawn=True)
    env_reset(env, 0)
    g = env.goal
    env.pos = (g[0] - 1, g[1])
    _, r, _, d = env_step(env, 2)
    assert r == 1.0 and not d and env.goal != g and env.goal not in env.hazards


def test_hazard_shaping_reward():
    env = HazardGridworld(shaping_weight=2.0, shaping_offset=0.5)
    env_reset(env, 0)
    _, r, _, _ = env_step(env, 3)  # bump into the top wall, position unchanged
    dist = abs(env.pos[0] - env.goal[0]) + abs(env.pos[1] - env.goal[1])
    assert r == pytest.approx(2.0 * (0.5 - dist / env.max_dist))


def test_velocity_chain_cost_and_reward():
    env = VelocityChain(velocity_limit=0.5)
    env_reset(env, 0)
    _, r, c, _ = env_step(env, np.array([0.8]))
    assert c == 1.0 and r == pytest.approx(0.8)
    _, r, c, _ = env_step(env, np.array([-0.3]))
    assert c == 0.0 and r == pytest.approx(-0.3)


def test_continuous_actions_are_clipped():
    env = VelocityChain()
    env_reset(env, 0)
    _, r, _, _ = env_step(env, [5.0])
    assert r == 1.0


def test_invalid_actions_and_step_after_done():
    env = HazardGridworld(max_episode_len=1)
    env_reset(env, 0)
    for bad in (4, -1, 1.5, "a"):
        with pytest.raises(InvalidInputError):
            env_step(env, bad)
    env_step(env, 0)
    with pytest.raises(UsageError):
        env_step(env, 0)
    cont = PointCircle()
    env_reset(cont, 0)
    with pytest.raises(InvalidInputError):
        env_step(cont, [0.1])
    with pytest.raises(InvalidInputError):
        env_step(cont, [np.nan, 0.0])


def test_step_before_reset_is_usage_error():
    with pytest.raises(UsageError):
        VelocityChain().step([0.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 50))
def test_hazard_layout_valid(seed, n_hazards):
    env = HazardGridworld(n_hazards=n_hazards, layout_seed=seed)
    assert len(env.hazards) == n_hazards
    assert env.goal not in env.hazards
    assert all(r > 0 for r, _ in env.hazards)
