"""Policy and critic networks built on the tape in :mod:`coopsac.grad`."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import grad as G
from .grad import ParameterSet, Tape, Var

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)
# tanh rounds to exactly +-1 in float64 once |u| > ~19; keep actions strictly inside
ACTION_LIMIT = float(np.nextafter(1.0, 0.0))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str = "",
             last_scale: float = 3e-3) -> dict[str, np.ndarray]:
    """Fan-in uniform init for hidden layers, small uniform init for the last."""
    arrays = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = last_scale if i == n_layers - 1 else 1.0 / math.sqrt(fan_in)
        arrays[f"{prefix}l{i}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        arrays[f"{prefix}l{i}.b"] = rng.uniform(-bound, bound, fan_out)
    return arrays


def mlp_forward(x: Var, weights: dict[str, Var], prefix: str, n_layers: int,
                final_relu: bool = False) -> Var:
    h = x
    for i in range(n_layers):
        h = G.affine(h, weights[f"{prefix}l{i}.w"], weights[f"{prefix}l{i}.b"])
        if i < n_layers - 1 or final_relu:
            h = G.relu(h)
    return h


def _check_obs(obs: np.ndarray, dim: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.shape[-1] != dim:
        raise ValueError(f"expected observation dimension {dim}, got {obs.shape[-1]}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    return obs


def log_one_minus_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` in the overflow-free form ``2(log 2 - u - softplus(-2u))``."""
    if isinstance(u, Var):
        return 2.0 * (_LOG2 - u - G.softplus(-2.0 * u))
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(pre_tanh: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of ``tanh(u)`` for ``u ~ N(mean, exp(log_std))``, summed over action dims."""
    z = (pre_tanh - mean) / np.exp(log_std)
    logp = -0.5 * z * z - log_std - _HALF_LOG_2PI - log_one_minus_tanh_sq(pre_tanh)
    return logp.sum(axis=-1)


class PolicyNet:
    """Squashed-Gaussian policy: relu trunk, separate mean and log-std heads."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 rng: np.random.Generator | None = None, name: str = "pi"):
        rng = rng if rng is not None else np.random.default_rng()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.hidden = tuple(hidden)
        self.name = name
        trunk = {}
        sizes = (obs_dim, *self.hidden)
        for i in range(len(sizes) - 1):
            bound = 1.0 / math.sqrt(sizes[i])
            trunk[f"trunk.l{i}.w"] = rng.uniform(-bound, bound, (sizes[i], sizes[i + 1]))
            trunk[f"trunk.l{i}.b"] = rng.uniform(-bound, bound, sizes[i + 1])
        trunk.update(init_mlp((self.hidden[-1], act_dim), rng, "mean."))
        trunk.update(init_mlp((self.hidden[-1], act_dim), rng, "log_std."))
        self.params = ParameterSet(trunk)

    def heads(self, tape: Tape, obs: Var, trainable: bool = True) -> tuple[Var, Var]:
        """Mean and clamped log-std for a batch of observations."""
        w = tape.params(self.params, trainable, prefix=f"{self.name}.")
        h = mlp_forward(obs, w, "trunk.", len(self.hidden), final_relu=True)
        mean = G.affine(h, w["mean.l0.w"], w["mean.l0.b"])
        log_std = G.clip(G.affine(h, w["log_std.l0.w"], w["log_std.l0.b"]),
                         LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, tape: Tape, obs: np.ndarray, rng: np.random.Generator,
               trainable: bool = True) -> tuple[Var, Var]:
        """Reparameterized sample ``tanh(mean + std * xi)`` and its log-probability.

        The log-probability includes the tanh change-of-variables term and is
        summed over action dimensions, giving shape ``(batch,)``.
        """
        obs = _check_obs(obs, self.obs_dim)
        mean, log_std = self.heads(tape, tape.const(obs), trainable)
        xi = rng.standard_normal(mean.shape)
        u = mean + G.exp(log_std) * xi
        action = G.clip(G.tanh(u), -ACTION_LIMIT, ACTION_LIMIT)
        logp = (-0.5 * xi * xi - _HALF_LOG_2PI) - log_std - log_one_minus_tanh_sq(u)
        return action, logp.sum(axis=-1)

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> np.ndarray:
        """Numpy action for acting in an environment (no gradient bookkeeping)."""
        tape = Tape()
        single = np.asarray(obs).ndim == 1
        obs = _check_obs(obs, self.obs_dim)
        mean, log_std = self.heads(tape, tape.const(obs), trainable=False)
        if deterministic:
            a = np.tanh(mean.value)
        else:
            a = np.tanh(mean.value + np.exp(log_std.value) * rng.standard_normal(mean.shape))
        a = np.clip(a, -ACTION_LIMIT, ACTION_LIMIT)
        return a[0] if single else a

    def distribution(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tape = Tape()
        mean, log_std = self.heads(tape, tape.const(_check_obs(obs, self.obs_dim)), False)
        return mean.value, log_std.value


class QNet:
    """MLP on the concatenated (observation, action) pair, scalar output."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 rng: np.random.Generator | None = None, name: str = "q"):
        rng = rng if rng is not None else np.random.default_rng()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.hidden = tuple(hidden)
        self.name = name
        sizes = (obs_dim + act_dim, *self.hidden, 1)
        self.params = ParameterSet(init_mlp(sizes, rng))

    def forward(self, tape: Tape, obs: Var, action: Var, trainable: bool = True) -> Var:
        if obs.shape[-1] != self.obs_dim or action.shape[-1] != self.act_dim:
            raise ValueError("observation/action dimension mismatch")
        w = tape.params(self.params, trainable, prefix=f"{self.name}.")
        out = mlp_forward(G.concat([obs, action], axis=-1), w, "", len(self.hidden) + 1)
        return G.reduce_sum(out, axis=-1)

    def value(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        tape = Tape()
        obs = _check_obs(obs, self.obs_dim)
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        return self.forward(tape, tape.const(obs), tape.const(action), trainable=False).value

    def copy(self, name: str | None = None) -> "QNet":
        clone = object.__new__(QNet)
        clone.obs_dim, clone.act_dim, clone.hidden = self.obs_dim, self.act_dim, self.hidden
        clone.name = name or self.name
        clone.params = self.params.copy()
        return clone


def soft_update(target: QNet, online: QNet, tau: float) -> QNet:
    """``target <- tau * online + (1 - tau) * target`` elementwise, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.params.shapes() != online.params.shapes():
        raise ValueError("target and online networks differ in shape")
    for name in target.params:
        t = target.params[name]
        t *= 1.0 - tau
        t += tau * online.params[name]
    return target


class TwinCritic:
    """Two online Q-nets evaluated through their minimum, with lagged targets.

    ``twin=False`` keeps a single head so the plain one-critic form stays
    available.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256),
                 rng: np.random.Generator | None = None, twin: bool = True, name: str = "q"):
        rng = rng if rng is not None else np.random.default_rng()
        self.twin = twin
        self.online = [QNet(obs_dim, act_dim, hidden, rng, name=f"{name}1")]
        if twin:
            self.online.append(QNet(obs_dim, act_dim, hidden, rng, name=f"{name}2"))
        self.target = [q.copy(name=f"{q.name}_targ") for q in self.online]

    @property
    def obs_dim(self) -> int:
        return self.online[0].obs_dim

    @property
    def act_dim(self) -> int:
        return self.online[0].act_dim

    def min_on_tape(self, tape: Tape, obs: Var, action: Var, trainable: bool = False,
                    use_target: bool = False) -> Var:
        nets = self.target if use_target else self.online
        out = nets[0].forward(tape, obs, action, trainable)
        for q in nets[1:]:
            out = G.minimum(out, q.forward(tape, obs, action, trainable))
        return out

    def soft_update(self, tau: float) -> None:
        for targ, q in zip(self.target, self.online):
            soft_update(targ, q, tau)


def q_min(critic: TwinCritic, obs: np.ndarray, action: np.ndarray,
          use_target: bool = False) -> np.ndarray:
    """Elementwise minimum over the critic's online (or target) heads."""
    nets = critic.target if use_target else critic.online
    values = [q.value(obs, action) for q in nets]
    return np.minimum.reduce(values) if len(values) > 1 else values[0]
