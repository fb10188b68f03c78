"""Cooperative consecutive policies: one SAC agent per subtask, chained critics.

Agent ``n`` acts while subtask ``n`` is active and stores its experience in
buffer ``n``. Each training iteration regresses critic ``n`` and critic
``n + 1`` on buffer ``n`` (both with agent ``n``'s policy supplying target
actions) and trains policy ``n`` on a convex combination of the two critics,
each rescaled to [0, 1] over the minibatch. The last agent only sees its own
critic.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .envs import SubtaskEnv
from .grad import NumericFault, Tape, Var
from .nets import TwinCritic
from .sac import (Batch, Objective, SACAgent, SACConfig, alpha_update, critic_update,
                  policy_update)

log = logging.getLogger(__name__)


class DegenerateRange(ValueError):
    """Both critics are flat, so no cooperative ratio is defined."""


@dataclass
class TransitionRecord:
    obs: np.ndarray
    action: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: bool
    subtask: int


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions carrying the full reward vector."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, n_rewards: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, act_dim))
        self.rewards = np.zeros((self.capacity, n_rewards))
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.dones = np.zeros(self.capacity)
        self.subtasks = np.zeros(self.capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, rec: TransitionRecord) -> None:
        if len(rec.rewards) != self.rewards.shape[1]:
            raise ValueError(f"reward vector has {len(rec.rewards)} entries, "
                             f"expected {self.rewards.shape[1]}")
        i = self.ptr
        self.obs[i] = rec.obs
        self.actions[i] = rec.action
        self.rewards[i] = rec.rewards
        self.next_obs[i] = rec.next_obs
        self.dones[i] = float(rec.done)
        self.subtasks[i] = rec.subtask
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Slot indices oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def records(self) -> list[TransitionRecord]:
        return [TransitionRecord(self.obs[i].copy(), self.actions[i].copy(),
                                 self.rewards[i].copy(), self.next_obs[i].copy(),
                                 bool(self.dones[i]), int(self.subtasks[i]))
                for i in self._order()]

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, batch_size)

    def batch(self, idx: np.ndarray, reward_index: int) -> Batch:
        """Minibatch with one reward channel (0-based ``reward_index``)."""
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx, reward_index],
                     self.next_obs[idx], self.dones[idx])


class ReplayBufferSet(list):
    """One :class:`ReplayBuffer` per subtask, indexed from 0."""

    @classmethod
    def create(cls, n: int, capacity: int, obs_dim: int, act_dim: int) -> "ReplayBufferSet":
        return cls(ReplayBuffer(capacity, obs_dim, act_dim, n) for _ in range(n))


@dataclass
class CoopConfig:
    n_subtasks: int = 2
    eta: float | Sequence[float] = 0.1
    norm_epsilon: float = 1e-8
    norm_fallback: float = 0.5
    buffer_capacity: int = 1_000_000
    min_buffer_fill: int = 1000
    absorbing_terminal: bool = True
    # until the next agent is ready its critic has seen no data of its own,
    # so the policy objective uses only the agent's own critic
    wait_for_next: bool = True
    etas: list[float] = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_subtasks < 1:
            raise ValueError("n_subtasks must be at least 1")
        n_coop = self.n_subtasks - 1
        if np.isscalar(self.eta):
            etas = [float(self.eta)] * n_coop
        else:
            etas = [float(e) for e in self.eta]
            if len(etas) != n_coop:
                raise ValueError(f"need {n_coop} cooperative ratios, got {len(etas)}")
        for e in etas:
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"cooperative ratio {e} outside [0, 1]")
        self.etas = etas

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["etas"]
        d["eta"] = list(self.etas) if not np.isscalar(self.eta) else self.eta
        return d


def normalize_q_over_batch(q, epsilon: float = 1e-8, fallback: float = 0.5):
    """Affine rescale of per-sample values to [0, 1] using the batch min and max.

    Works on numpy arrays and on tape variables; the min and max enter as
    constants, so on a tape the gradient is ``dq / (max - min)``. A range
    below ``epsilon`` maps every sample to ``fallback``.
    """
    values = q.value if isinstance(q, Var) else np.asarray(q, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot normalise an empty batch")
    if not np.all(np.isfinite(values)):
        raise NumericFault("non-finite critic value")
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < epsilon:
        full = np.full(values.shape, float(fallback))
        return q.tape.const(full) if isinstance(q, Var) else full
    return (q - lo) / (hi - lo)


def convex_combination(q_hat_n, q_hat_next, eta: float):
    """``eta * q_hat_n + (1 - eta) * q_hat_next`` elementwise."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if np.shape(getattr(q_hat_n, "value", q_hat_n)) != np.shape(getattr(q_hat_next, "value",
                                                                         q_hat_next)):
        raise ValueError("critic evaluations differ in length")
    if not isinstance(q_hat_n, Var):
        q_hat_n = np.asarray(q_hat_n, dtype=np.float64)
        q_hat_next = np.asarray(q_hat_next, dtype=np.float64)
    return eta * q_hat_n + (1.0 - eta) * q_hat_next


def optimal_eta(range_n: float, range_next: float) -> float:
    """Ratio that makes the normalised blend rank actions like ``Q_n + Q_next``."""
    if range_n < 0 or range_next < 0:
        raise ValueError("ranges must be non-negative")
    total = range_n + range_next
    if total == 0:
        raise DegenerateRange("both critics have zero range")
    return range_n / total


def cooperative_objective(critic_n: TwinCritic, critic_next: TwinCritic | None, eta: float,
                          epsilon: float = 1e-8, fallback: float = 0.5) -> Objective:
    """Policy objective ``C``: blend of the batch-normalised current and next critics.

    ``critic_next=None`` (the last agent) or ``eta == 1`` uses the current
    critic alone.
    """

    def objective(tape: Tape, obs: np.ndarray, actions: Var) -> Var:
        s = tape.const(obs)
        q_hat_n = normalize_q_over_batch(critic_n.min_on_tape(tape, s, actions), epsilon,
                                         fallback)
        if critic_next is None or eta == 1.0:
            return q_hat_n
        q_hat_next = normalize_q_over_batch(critic_next.min_on_tape(tape, s, actions),
                                            epsilon, fallback)
        return convex_combination(q_hat_n, q_hat_next, eta)

    return objective


class EpisodeStats(NamedTuple):
    steps: int
    success: bool
    returns: np.ndarray     # per-subtask undiscounted return
    aborted: bool = False
    error: str | None = None


class AgentSet:
    """N agents, N buffers, and the cooperative configuration tying them together."""

    def __init__(self, agents: list[SACAgent], buffers: ReplayBufferSet, config: CoopConfig):
        if not (len(agents) == len(buffers) == config.n_subtasks):
            raise ValueError("agent count, buffer count and n_subtasks must agree")
        self.agents = agents
        self.buffers = buffers
        self.config = config

    @classmethod
    def build(cls, obs_dim: int, act_dim: int, coop: CoopConfig,
              sac: SACConfig | None = None, seed: int | None = None) -> "AgentSet":
        sac = sac or SACConfig()
        streams = np.random.SeedSequence(seed).spawn(coop.n_subtasks)
        agents = [SACAgent(obs_dim, act_dim, sac, np.random.default_rng(ss), name=f"agent{i + 1}")
                  for i, ss in enumerate(streams)]
        buffers = ReplayBufferSet.create(coop.n_subtasks, coop.buffer_capacity, obs_dim, act_dim)
        return cls(agents, buffers, coop)

    @property
    def n(self) -> int:
        return self.config.n_subtasks

    def ready(self, i: int) -> bool:
        """Whether agent ``i`` (0-based) has enough data to train."""
        need = max(self.agents[i].config.batch_size, self.config.min_buffer_fill)
        return len(self.buffers[i]) >= need

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, agent in enumerate(self.agents):
            out.update({f"agent{i + 1}/{k}": v for k, v in agent.state_arrays().items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i, agent in enumerate(self.agents):
            prefix = f"agent{i + 1}/"
            agent.load_arrays({k[len(prefix):]: v for k, v in arrays.items()
                               if k.startswith(prefix)})


def gather_episode(agents: AgentSet, env: SubtaskEnv, deterministic: bool = False,
                   record: bool = True, step_budget: int | None = None) -> EpisodeStats:
    """Roll out one episode, switching agents whenever the active subtask changes.

    Each transition goes to the buffer of the subtask that was active when
    its action was taken. ``step_budget`` cuts the episode short (the last
    transition is then stored as non-terminal).
    """
    returns = np.zeros(agents.n)
    steps = 0
    try:
        obs, n = env.reset()
    except Exception as exc:  # noqa: BLE001 - environment faults are reported, not raised
        return EpisodeStats(0, False, returns, True, repr(exc))
    success = False
    while True:
        agent = agents.agents[n - 1]
        action = agent.act(obs, deterministic=deterministic)
        try:
            res = env.step(action)
        except Exception as exc:  # noqa: BLE001
            log.warning("environment step failed at step %d: %r", steps, exc)
            return EpisodeStats(steps, False, returns, True, repr(exc))
        steps += 1
        returns += res.rewards
        if record:
            agents.buffers[n - 1].add(TransitionRecord(obs, action, res.rewards, res.obs,
                                                       res.terminal, n))
        obs, n = res.obs, res.subtask
        success = res.success
        if res.done or (step_budget is not None and steps >= step_budget):
            break
    return EpisodeStats(steps, success, returns)


def _absorb(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """Terminal rewards repeat forever: ``r / (1 - gamma)`` with bootstrapping cut."""
    return np.where(dones > 0, rewards / (1.0 - gamma), rewards)


def train_iteration(agents: AgentSet) -> list[dict]:
    """One pass of cooperative training over every agent, in subtask order."""
    cfg = agents.config
    out = []
    for i, agent in enumerate(agents.agents):
        stats = {"trained": False, "critic_loss": np.nan, "policy_loss": np.nan,
                 "alpha": agent.alpha}
        if not agents.ready(i):
            out.append(stats)
            continue
        try:
            sac = agent.config
            idx = agents.buffers[i].sample(sac.batch_size, agent.rng)
            last = i == agents.n - 1
            for j in ([i] if last else [i, i + 1]):
                batch = agents.buffers[i].batch(idx, j)
                if cfg.absorbing_terminal:
                    batch = batch._replace(rewards=_absorb(batch.rewards, batch.dones,
                                                           sac.gamma))
                owner = agents.agents[j]
                loss = critic_update(owner.critic, owner.critic_opts, batch, agent.policy,
                                     agent.alpha, sac.gamma, sac.tau, agent.rng)
                if j == i:
                    stats["critic_loss"] = loss
            solo = last or (cfg.wait_for_next and not agents.ready(i + 1))
            critic_next = None if solo else agents.agents[i + 1].critic
            eta = 1.0 if solo else cfg.etas[i]
            objective = cooperative_objective(agent.critic, critic_next, eta,
                                              cfg.norm_epsilon, cfg.norm_fallback)
            obs = agents.buffers[i].obs[idx]
            stats["policy_loss"], logp = policy_update(agent, obs, objective)
            stats["alpha"] = alpha_update(agent, logp)
            stats["trained"] = True
        except FloatingPointError as exc:
            raise NumericFault(f"agent {i + 1}: {exc}",
                               getattr(exc, "node_index", None)) from exc
        out.append(stats)
    return out
