"""Finite chained-subtask MDPs and exact dynamic-programming checks.

States are partitioned into consecutive blocks, one per subtask. Subtask
``n`` pays a reward in [0, 1] inside its own block, 0 in earlier blocks and
1 in later blocks. Transitions are deterministic and may only advance from
block ``n`` to ``n + 1`` through a state-action pair whose own-block reward
is at least ``1 - e``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ccp import optimal_eta


class ConvergenceError(RuntimeError):
    pass


@dataclass
class ChainMDP:
    block: np.ndarray        # (S,) 1-based subtask block of each state
    next_state: np.ndarray   # (S, A) deterministic successor
    own_reward: np.ndarray   # (S, A) reward of the owning subtask, in [0, 1]
    gamma: float = 0.95
    e: float = 0.05

    def __post_init__(self):
        self.block = np.asarray(self.block, dtype=np.int64)
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.own_reward = np.asarray(self.own_reward, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def n_subtasks(self) -> int:
        return int(self.block.max())

    def rewards(self, n: int) -> np.ndarray:
        """Reward table ``R_n(s, a)`` of subtask ``n`` (1-based)."""
        b = self.block[:, None]
        return np.where(b == n, self.own_reward, np.where(b < n, 0.0, 1.0))

    def composite_reward(self) -> np.ndarray:
        return sum(self.rewards(n) for n in range(1, self.n_subtasks + 1))

    def subtask_index(self, s: int) -> int:
        return int(self.block[s])

    def validate(self) -> None:
        S, A = self.next_state.shape
        if self.block.shape != (S,) or self.own_reward.shape != (S, A):
            raise ValueError("inconsistent table shapes")
        present = set(self.block.tolist())
        if present != set(range(1, self.n_subtasks + 1)):
            raise ValueError("every subtask needs a non-empty block")
        if np.any((self.own_reward < 0) | (self.own_reward > 1)):
            raise ValueError("own-block rewards must lie in [0, 1]")
        if np.any((self.next_state < 0) | (self.next_state >= S)):
            raise ValueError("successor out of range")
        src = self.block[:, None]
        dst = self.block[self.next_state]
        if np.any(dst > src + 1):
            raise ValueError("transitions may not skip a subtask")
        advance = dst == src + 1
        if np.any(advance & (self.own_reward < 1.0 - self.e)):
            raise ValueError("advance allowed only where the own reward reaches 1 - e")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int | None = None,
               n_actions: int | None = None, n_subtasks: int | None = None,
               gamma: float = 0.95, e: float = 0.05, p_exit: float = 0.2,
               p_back: float = 0.1) -> "ChainMDP":
        N = int(rng.integers(2, 5)) if n_subtasks is None else n_subtasks
        S = int(rng.integers(2 * N, 31)) if n_states is None else n_states
        A = int(rng.integers(2, 6)) if n_actions is None else n_actions
        if S < N:
            raise ValueError("need at least one state per subtask")
        # N non-empty contiguous blocks
        cuts = np.sort(rng.choice(np.arange(1, S), N - 1, replace=False))
        block = np.searchsorted(cuts, np.arange(S), side="right") + 1
        members = [np.flatnonzero(block == n) for n in range(1, N + 1)]
        next_state = np.zeros((S, A), dtype=np.int64)
        own = np.zeros((S, A))
        for s in range(S):
            b = block[s]
            for a in range(A):
                u = rng.random()
                if b < N and u < p_exit:
                    own[s, a] = rng.uniform(1.0 - e, 1.0)
                    next_state[s, a] = rng.choice(members[b])
                elif b > 1 and u > 1.0 - p_back:
                    own[s, a] = rng.uniform(0.0, 1.0 - e)
                    next_state[s, a] = rng.choice(members[b - 2])
                else:
                    own[s, a] = rng.uniform(0.0, 1.0 - e)
                    next_state[s, a] = rng.choice(members[b - 1])
        for b in range(1, N):
            if not np.any(block[next_state[members[b - 1]]] == b + 1):
                s = rng.choice(members[b - 1])
                a = rng.integers(A)
                own[s, a] = rng.uniform(1.0 - e, 1.0)
                next_state[s, a] = rng.choice(members[b])
        mdp = cls(block, next_state, own, gamma, e)
        mdp.validate()
        return mdp

    def to_json(self) -> str:
        return json.dumps({"block": self.block.tolist(), "next_state": self.next_state.tolist(),
                           "own_reward": self.own_reward.tolist(), "gamma": self.gamma,
                           "e": self.e}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChainMDP":
        mdp = cls(**json.loads(text))
        mdp.validate()
        return mdp


def value_iteration(mdp: ChainMDP, rewards: np.ndarray, gamma: float | None = None,
                    tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q-table for ``rewards`` by repeated Bellman optimality backups.

    Stops once the sup-norm change guarantees the result is within ``tol``
    of the fixed point.
    """
    gamma = mdp.gamma if gamma is None else gamma
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    stop = tol * (1.0 - gamma) / gamma
    q = np.zeros_like(rewards, dtype=np.float64)
    for _ in range(max_iter):
        new = rewards + gamma * q.max(axis=1)[mdp.next_state]
        delta = np.max(np.abs(new - q))
        q = new
        if delta < stop:
            return q
    raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps")


def _policy_matrix(policy: np.ndarray, n_actions: int) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 1:
        return np.eye(n_actions)[policy]
    return policy


def evaluate_policy_iterative(mdp: ChainMDP, rewards: np.ndarray, policy: np.ndarray,
                              gamma: float | None = None, tol: float = 1e-12,
                              max_iter: int = 100_000) -> np.ndarray:
    """``Q^pi`` by repeated expectation backups; ``policy`` is (S,) actions or (S, A) probs."""
    gamma = mdp.gamma if gamma is None else gamma
    pi = _policy_matrix(policy, mdp.n_actions)
    stop = tol * (1.0 - gamma) / gamma
    q = np.zeros_like(rewards, dtype=np.float64)
    for _ in range(max_iter):
        v = (pi * q).sum(axis=1)
        new = rewards + gamma * v[mdp.next_state]
        delta = np.max(np.abs(new - q))
        q = new
        if delta < stop:
            return q
    raise ConvergenceError("policy evaluation did not converge")


def evaluate_policy_exact(mdp: ChainMDP, rewards: np.ndarray, policy: np.ndarray,
                          gamma: float | None = None) -> np.ndarray:
    """``Q^pi`` from the linear system ``(I - gamma P_pi) q = r`` over state-action pairs."""
    gamma = mdp.gamma if gamma is None else gamma
    S, A = mdp.n_states, mdp.n_actions
    pi = _policy_matrix(policy, A)
    P = np.zeros((S * A, S * A))
    rows = np.arange(S * A)
    succ = mdp.next_state.reshape(-1)
    for a2 in range(A):
        P[rows, succ * A + a2] += pi[succ, a2]
    q = np.linalg.solve(np.eye(S * A) - gamma * P, rewards.reshape(-1))
    return q.reshape(S, A)


def policy_iteration(mdp: ChainMDP, rewards: np.ndarray, gamma: float | None = None,
                     max_iter: int = 1000) -> np.ndarray:
    """Optimal Q-table by exact evaluation plus greedy improvement."""
    policy = np.zeros(mdp.n_states, dtype=np.int64)
    for _ in range(max_iter):
        q = evaluate_policy_exact(mdp, rewards, policy, gamma)
        best = q.max(axis=1, keepdims=True)
        keep = q[np.arange(mdp.n_states), policy] >= best[:, 0] - 1e-12
        new = np.where(keep, policy, q.argmax(axis=1))
        if np.array_equal(new, policy):
            return q
        policy = new
    raise ConvergenceError("policy iteration did not converge")


def cooperative_reward(mdp: ChainMDP, n: int, eta: float) -> np.ndarray:
    return eta * mdp.rewards(n) + (1.0 - eta) * mdp.rewards(n + 1)


def verify_lemma1(mdp: ChainMDP, n: int, eta: float, policy: np.ndarray,
                  gamma: float | None = None) -> float:
    """Max gap between ``C_n`` and ``eta Q_n + (1 - eta) Q_{n+1}`` under a fixed policy.

    ``C_n`` comes from iterative evaluation of the blended reward, the two
    critics from separate exact linear solves.
    """
    c = evaluate_policy_iterative(mdp, cooperative_reward(mdp, n, eta), policy, gamma)
    q_n = evaluate_policy_exact(mdp, mdp.rewards(n), policy, gamma)
    q_next = evaluate_policy_exact(mdp, mdp.rewards(n + 1), policy, gamma)
    return float(np.max(np.abs(c - (eta * q_n + (1.0 - eta) * q_next))))


def per_state_normalize(q: np.ndarray, fallback: float = 0.5) -> np.ndarray:
    """Rescale each row to [0, 1] over actions; flat rows map to ``fallback``."""
    lo = q.min(axis=1, keepdims=True)
    ran = q.max(axis=1, keepdims=True) - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (q - lo) / ran
    return np.where(ran > 0, out, fallback)


def first_argmax(values: np.ndarray, atol: float = 0.0) -> int:
    """Lowest index whose value is within ``atol`` of the maximum."""
    return int(np.flatnonzero(values >= values.max() - atol)[0])


def eta_recovery_from_tables(q_n: np.ndarray, q_next: np.ndarray,
                             tie_tol: float = 1e-9) -> dict:
    """Per-state check that the range-ratio ``eta`` makes the normalised blend
    pick ``argmax(Q_n + Q_{n+1})``.

    Ties count within ``tie_tol`` on the summed scale (the blend is compared
    at the matching tolerance ``tie_tol / (Ran_n + Ran_{n+1})``) and go to
    the lowest action index on both sides. States where both critics are
    flat are skipped.
    """
    ran_n = q_n.max(axis=1) - q_n.min(axis=1)
    ran_next = q_next.max(axis=1) - q_next.min(axis=1)
    hat_n, hat_next = per_state_normalize(q_n), per_state_normalize(q_next)
    checked = agreed = skipped = 0
    mismatches = []
    for s in range(q_n.shape[0]):
        if ran_n[s] == 0 and ran_next[s] == 0:
            skipped += 1
            continue
        eta = optimal_eta(ran_n[s], ran_next[s])
        blend = eta * hat_n[s] + (1.0 - eta) * hat_next[s]
        total = ran_n[s] + ran_next[s]
        a_blend = first_argmax(blend, tie_tol / total)
        a_sum = first_argmax(q_n[s] + q_next[s], tie_tol)
        checked += 1
        if a_blend == a_sum:
            agreed += 1
        else:
            mismatches.append({"state": s, "eta": float(eta), "blend_action": a_blend,
                               "sum_action": a_sum})
    return {"states": q_n.shape[0], "checked": checked, "agreed": agreed, "skipped": skipped,
            "mismatches": mismatches}


def verify_eta_recovery(mdp: ChainMDP, n: int, gamma: float | None = None,
                        tie_tol: float = 1e-9) -> dict:
    """:func:`eta_recovery_from_tables` on the optimal critics of subtasks ``n`` and ``n + 1``."""
    q_n = value_iteration(mdp, mdp.rewards(n), gamma)
    q_next = value_iteration(mdp, mdp.rewards(n + 1), gamma)
    return eta_recovery_from_tables(q_n, q_next, tie_tol)
