"""Environment-facing types shared by every task, plus the small test tasks."""

from __future__ import annotations

from typing import NamedTuple, Protocol

import numpy as np


class StepResult(NamedTuple):
    obs: np.ndarray
    rewards: np.ndarray  # one reward per subtask
    done: bool           # episode over (success or step cap)
    success: bool
    subtask: int         # 1-based index of the subtask active at ``obs``

    @property
    def terminal(self) -> bool:
        """True when bootstrapping must stop; hitting the step cap is not terminal."""
        return self.success


class SubtaskEnv(Protocol):
    obs_dim: int
    act_dim: int
    n_subtasks: int
    max_steps: int

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, int]: ...

    def step(self, action: np.ndarray) -> StepResult: ...


class CompositeRewardEnv:
    """View of a multi-subtask env as one task with reward ``sum_n r_n``.

    With the nested reward structure the sum equals ``(n - 1) + r_n`` for a
    state in subtask ``n``; the subtask index is pinned to 1.
    """

    n_subtasks = 1

    def __init__(self, env: SubtaskEnv):
        self.env = env
        self.obs_dim, self.act_dim = env.obs_dim, env.act_dim
        self.max_steps = env.max_steps

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, int]:
        obs, _ = self.env.reset(seed)
        return obs, 1

    def step(self, action: np.ndarray) -> StepResult:
        res = self.env.step(action)
        return res._replace(rewards=np.array([res.rewards.sum()]), subtask=1)


class PointMassReach:
    """1-D velocity-controlled point that must reach a random goal.

    Observation ``(x, goal)`` in [-1, 1]^2; the action sets velocity as
    ``action * max_speed``. Reward is ``-|x - goal|`` per step and 0 on the
    step that lands within ``tolerance`` of the goal, which ends the episode.
    """

    obs_dim = 2
    act_dim = 1
    n_subtasks = 1

    def __init__(self, max_steps: int = 50, max_speed: float = 0.1, tolerance: float = 0.05,
                 seed: int | None = None):
        self.max_steps = max_steps
        self.max_speed = max_speed
        self.tolerance = tolerance
        self.rng = np.random.default_rng(seed)
        self.x = 0.0
        self.goal = 0.0
        self.t = 0

    def _obs(self) -> np.ndarray:
        return np.array([self.x, self.goal])

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, int]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.x, self.goal = self.rng.uniform(-1.0, 1.0, 2)
        while abs(self.x - self.goal) < self.tolerance:
            self.goal = self.rng.uniform(-1.0, 1.0)
        self.t = 0
        return self._obs(), 1

    def step(self, action: np.ndarray) -> StepResult:
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        if not np.isfinite(a):
            raise ValueError("non-finite action")
        self.x = float(np.clip(self.x + a * self.max_speed, -1.0, 1.0))
        self.t += 1
        dist = abs(self.x - self.goal)
        success = dist < self.tolerance
        reward = 0.0 if success else -dist
        done = success or self.t >= self.max_steps
        return StepResult(self._obs(), np.array([reward]), done, success, 1)
