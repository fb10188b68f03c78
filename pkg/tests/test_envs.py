import numpy as np
import pytest

from coopsac.envs import CompositeRewardEnv, PointMassReach
from coopsac.maze import MazeEnv, MazeSpec, subtask_index


def test_point_mass_reset_keeps_goal_away():
    env = PointMassReach(seed=0)
    for _ in range(500):
        obs, n = env.reset()
        assert n == 1 and np.all(np.abs(obs) <= 1.0)
        assert abs(obs[0] - obs[1]) >= env.tolerance


def test_point_mass_reward_and_success():
    env = PointMassReach(seed=0)
    env.reset()
    env.x, env.goal = 0.0, 0.25
    res = env.step(np.array([1.0]))
    assert res.rewards[0] == pytest.approx(-0.15) and not res.done
    res = env.step(np.array([1.0]))
    assert res.success and res.done and res.rewards[0] == 0.0


def test_point_mass_clips_position_and_action():
    env = PointMassReach(seed=0)
    env.reset()
    env.x, env.goal = 0.98, -0.5
    env.step(np.array([7.0]))
    assert env.x == 1.0


def test_point_mass_step_cap():
    env = PointMassReach(max_steps=5, seed=1)
    env.reset()
    env.x, env.goal = -1.0, 1.0
    results = [env.step(np.array([0.0])) for _ in range(5)]
    assert [r.done for r in results] == [False] * 4 + [True]
    assert not results[-1].terminal


def test_greedy_controller_solves_point_mass():
    env = PointMassReach(seed=2)
    for _ in range(50):
        obs, _ = env.reset()
        while True:
            res = env.step(np.array([np.clip((obs[1] - obs[0]) / env.max_speed, -1, 1)]))
            obs = res.obs
            if res.done:
                break
        assert res.success


def test_composite_wrapper_sums_rewards():
    spec = MazeSpec.desk(3)
    inner = MazeEnv(spec, seed=4)
    env = CompositeRewardEnv(inner)
    obs, n = env.reset()
    assert n == 1 and env.n_subtasks == 1 and env.obs_dim == inner.obs_dim
    rng = np.random.default_rng(4)
    for _ in range(100):
        res = env.step(rng.uniform(-1, 1, 2))
        room = subtask_index(inner.state, spec)
        own = min(max((inner.state.x - (room - 1) * 6.0) / 6.0, 0.0), 1.0)
        assert res.subtask == 1 and res.rewards.shape == (1,)
        assert res.rewards[0] == pytest.approx((room - 1) + own, abs=1e-12)
