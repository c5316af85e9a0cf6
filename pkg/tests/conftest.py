import numpy as np
import pytest

from evolab.cmdp import StepRecord, Trajectory


def make_traj(rewards, costs=None, done=True, obs_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    costs = np.zeros(len(rewards)) if costs is None else costs
    n = len(rewards)
    steps = [StepRecord(rng.standard_normal(obs_dim), int(rng.integers(4)), float(r), float(c),
                        -1.0, done and i == n - 1)
             for i, (r, c) in enumerate(zip(rewards, costs))]
    return Trajectory(steps, final_state=rng.standard_normal(obs_dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
