"""Soft actor-critic pieces with an injectable policy objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import grad as G
from .grad import AdamState, NumericFault, Tape, Var, adam_step, backward
from .nets import PolicyNet, TwinCritic

# objective(tape, obs, actions) -> per-sample values on the tape, shape (batch,)
Objective = Callable[[Tape, np.ndarray, Var], Var]


@dataclass
class SACConfig:
    gamma: float = 0.95
    batch_size: int = 256
    tau: float = 0.005
    entropy_mode: str = "auto"
    fixed_alpha: float = 0.2
    target_entropy: float | None = None
    initial_alpha: float = 1.0
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    hidden_sizes: Sequence[int] = field(default_factory=lambda: [256, 256])
    twin_critics: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.entropy_mode not in ("auto", "fixed"):
            raise ValueError(f"entropy_mode must be 'auto' or 'fixed', got {self.entropy_mode!r}")
        if self.entropy_mode == "fixed" and self.fixed_alpha < 0:
            raise ValueError("fixed_alpha must be non-negative")
        self.hidden_sizes = list(self.hidden_sizes)

    def to_dict(self) -> dict:
        return asdict(self)


class Batch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # (batch,) for one reward channel
    next_obs: np.ndarray
    dones: np.ndarray


def _strip(grads: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in grads.items() if k.startswith(prefix)}


class SACAgent:
    """Policy, twin critic, and their optimiser states."""

    def __init__(self, obs_dim: int, act_dim: int, config: SACConfig | None = None,
                 rng: np.random.Generator | None = None, name: str = "agent"):
        self.config = config or SACConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.name = name
        cfg = self.config
        self.policy = PolicyNet(obs_dim, act_dim, cfg.hidden_sizes, self.rng)
        self.critic = TwinCritic(obs_dim, act_dim, cfg.hidden_sizes, self.rng,
                                 twin=cfg.twin_critics)
        self.policy_opt = AdamState.for_params(self.policy.params, lr=cfg.lr_policy)
        self.critic_opts = [AdamState.for_params(q.params, lr=cfg.lr_critic)
                            for q in self.critic.online]
        self.target_entropy = (-float(act_dim) if cfg.target_entropy is None
                               else float(cfg.target_entropy))
        self.log_alpha = G.ParameterSet({"log_alpha": np.array(math.log(cfg.initial_alpha))})
        self.alpha_opt = AdamState.for_params(self.log_alpha, lr=cfg.lr_alpha)

    @property
    def obs_dim(self) -> int:
        return self.policy.obs_dim

    @property
    def act_dim(self) -> int:
        return self.policy.act_dim

    @property
    def alpha(self) -> float:
        if self.config.entropy_mode == "fixed":
            return float(self.config.fixed_alpha)
        return float(np.exp(self.log_alpha["log_alpha"]))

    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        return self.policy.act(obs, self.rng, deterministic)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable array, keyed for the checkpoint format."""
        out = {f"policy/{k}": v for k, v in self.policy.params.items()}
        for q in self.critic.online + self.critic.target:
            out.update({f"{q.name}/{k}": v for k, v in q.params.items()})
        out["log_alpha"] = np.atleast_1d(self.log_alpha["log_alpha"])
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.policy.params.assign({k: arrays[f"policy/{k}"] for k in self.policy.params})
        for q in self.critic.online + self.critic.target:
            q.params.assign({k: arrays[f"{q.name}/{k}"] for k in q.params})
        self.log_alpha.set("log_alpha", arrays["log_alpha"].reshape(()))


def critic_target(critic: TwinCritic, policy: PolicyNet, alpha: float, gamma: float,
                  rewards: np.ndarray, next_obs: np.ndarray, dones: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Soft Bellman target ``r + (1 - d) * gamma * (Q_targ(s', a') - alpha * log pi(a'|s'))``.

    ``a'`` is a fresh sample from ``policy``; nothing here carries a gradient.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise ValueError("non-finite reward")
    tape = Tape()
    a_next, logp_next = policy.sample(tape, next_obs, rng, trainable=False)
    q_next = critic.min_on_tape(tape, tape.const(np.atleast_2d(next_obs)), a_next,
                                use_target=True)
    soft_value = q_next.value - alpha * logp_next.value
    return rewards + (1.0 - np.asarray(dones, dtype=np.float64)) * gamma * soft_value


def critic_update(critic: TwinCritic, opts: list[AdamState], batch: Batch, policy: PolicyNet,
                  alpha: float, gamma: float, tau: float, rng: np.random.Generator) -> float:
    """One regression step of every online head toward the soft target.

    Returns the mean squared error before the step, averaged over heads.
    Targets are Polyak-averaged afterwards.
    """
    if len(batch.obs) == 0:
        raise ValueError("empty batch")
    y = critic_target(critic, policy, alpha, gamma, batch.rewards, batch.next_obs,
                      batch.dones, rng)
    losses = []
    for q, opt in zip(critic.online, opts):
        tape = Tape()
        pred = q.forward(tape, tape.const(batch.obs), tape.const(batch.actions))
        loss = G.reduce_mean(G.square(pred - y))
        if not np.isfinite(loss.value):
            raise NumericFault(f"non-finite critic loss for {q.name}")
        grads = backward(tape, loss)
        adam_step(q.params, _strip(grads, f"{q.name}."), opt)
        losses.append(float(loss.value))
    critic.soft_update(tau)
    return float(np.mean(losses))


def own_critic_objective(critic: TwinCritic) -> Objective:
    """Plain SAC objective: the minimum of the agent's own online heads."""

    def objective(tape: Tape, obs: np.ndarray, actions: Var) -> Var:
        return critic.min_on_tape(tape, tape.const(obs), actions)

    return objective


def policy_update(agent: SACAgent, obs: np.ndarray, objective: Objective | None = None,
                  ) -> tuple[float, np.ndarray]:
    """Minimise ``mean(alpha * log pi(a'|s) - objective(s, a'))`` with ``a' ~ pi(s)``.

    Gradients flow through the reparameterised ``a'`` into the objective.
    Returns the loss and the sampled log-probabilities (for the temperature step).
    """
    if objective is None:
        objective = own_critic_objective(agent.critic)
    tape = Tape()
    actions, logp = agent.policy.sample(tape, obs, agent.rng)
    value = objective(tape, np.atleast_2d(obs), actions)
    if value.shape != logp.shape:
        raise ValueError(f"objective must return one value per sample {logp.shape}, "
                         f"got {value.shape}")
    loss = G.reduce_mean(agent.alpha * logp - value)
    if not np.isfinite(loss.value):
        raise NumericFault("non-finite policy loss")
    grads = backward(tape, loss)
    adam_step(agent.policy.params, _strip(grads, f"{agent.policy.name}."), agent.policy_opt)
    return float(loss.value), logp.value.copy()


def alpha_update(agent: SACAgent, logp: np.ndarray) -> float:
    """Temperature step on ``log alpha`` toward the target entropy; returns alpha."""
    if agent.config.entropy_mode == "fixed":
        return agent.alpha
    tape = Tape()
    log_alpha = tape.param("log_alpha", agent.log_alpha["log_alpha"])
    gap = float(np.mean(logp) + agent.target_entropy)
    loss = -(log_alpha * gap)
    grads = backward(tape, loss)
    adam_step(agent.log_alpha, grads, agent.alpha_opt)
    return agent.alpha


def sac_update(agent: SACAgent, batch: Batch) -> dict[str, float]:
    """One standard SAC step: critic, policy against its own critic, temperature."""
    cfg = agent.config
    critic_loss = critic_update(agent.critic, agent.critic_opts, batch, agent.policy,
                                agent.alpha, cfg.gamma, cfg.tau, agent.rng)
    policy_loss, logp = policy_update(agent, batch.obs)
    alpha = alpha_update(agent, logp)
    return {"critic_loss": critic_loss, "policy_loss": policy_loss, "alpha": alpha}
