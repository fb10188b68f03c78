"""Experiment orchestration: configs, training runs, sweeps, verification, curves."""

from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from . import chain
from . import grad as G
from .ccp import AgentSet, CoopConfig, gather_episode, train_iteration
from .envs import CompositeRewardEnv, PointMassReach
from .maze import MazeConfigError, MazeEnv, MazeSpec
from .sac import SACConfig

log = logging.getLogger(__name__)

METHODS = ("csac", "naive", "single")
ENVS = ("maze", "pointmass")

# Geometry and budget presets. ``full`` is the full-size maze; ``desk`` is
# small enough to train on a laptop CPU in minutes.
PROFILES: dict[str, dict[str, Any]] = {
    "full": {"room_width": 10.0, "max_steps": 1000, "epochs": 100, "hidden_sizes": [256, 256],
             "initial_alpha": 1.0},
    "desk": {"room_width": 6.0, "max_steps": 300, "epochs": 30, "hidden_sizes": [64, 64],
             "initial_alpha": 0.1},
}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit status 2)."""


class RunFault(RuntimeError):
    """A run stopped early; ``record`` is what was written to ``fault.json``."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


# -- configuration ---------------------------------------------------------

def _dataclass_from(cls, data: dict | None, what: str, drop: Sequence[str] = ()):
    data = dict(data or {})
    allowed = {f.name for f in dataclasses.fields(cls) if f.init} - set(drop)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} settings: {exc}") from exc


@dataclass
class RunConfig:
    method: str = "csac"
    env: str = "maze"
    profile: str = "desk"
    n_rooms: int = 2
    maze: MazeSpec | None = None
    coop: CoopConfig = field(default_factory=CoopConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    epochs: int = 30
    timesteps_per_epoch: int = 5000
    train_loops_per_epoch: int = 1000
    eval_episodes: int = 20
    checkpoint_every: int = 10
    seed: int = 0
    out_dir: str = "runs/default"

    _TOP_KEYS = ("method", "env", "profile", "n_rooms", "maze", "coop", "sac", "epochs",
                 "timesteps_per_epoch", "train_loops_per_epoch", "eval_episodes",
                 "checkpoint_every", "seed", "out_dir")

    @property
    def n_env_subtasks(self) -> int:
        return self.maze.n_rooms if self.env == "maze" else 1

    @classmethod
    def from_dict(cls, data: dict, extra_keys: Sequence[str] = ()) -> "RunConfig":
        """Build and validate a config; profile values fill in anything not given."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(cls._TOP_KEYS) - set(extra_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        method = data.get("method", "csac")
        env = data.get("env", "maze")
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
        if env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {env!r}")
        profile = data.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
        prof = PROFILES[profile]
        n_rooms = int(data.get("n_rooms", 2))

        maze = None
        if env == "maze":
            raw = data.get("maze")
            try:
                if raw is None:
                    maze = MazeSpec.generate(n_rooms, room_width=prof["room_width"],
                                             max_steps=prof["max_steps"])
                else:
                    maze = MazeSpec.from_json(json.dumps(raw))
            except (MazeConfigError, TypeError) as exc:
                raise ConfigError(f"invalid maze: {exc}") from exc
            n_rooms = maze.n_rooms

        sac_raw = dict(data.get("sac") or {})
        sac_raw.setdefault("hidden_sizes", list(prof["hidden_sizes"]))
        sac_raw.setdefault("initial_alpha", prof["initial_alpha"])
        sac = _dataclass_from(SACConfig, sac_raw, "sac")

        n_env = n_rooms if env == "maze" else 1
        coop_raw = dict(data.get("coop") or {})
        if "n_subtasks" in coop_raw:
            raise ConfigError("coop.n_subtasks is derived from the environment and method")
        n_agents = 1 if method == "single" else n_env
        if method == "naive":
            given = coop_raw.get("eta", 1.0)
            if any(e != 1.0 for e in np.atleast_1d(given)):
                raise ConfigError("method 'naive' fixes every cooperative ratio to 1")
            coop_raw["eta"] = 1.0
        if n_agents == 1:
            coop_raw.pop("eta", None)
        coop = _dataclass_from(CoopConfig, dict(coop_raw, n_subtasks=n_agents), "coop")

        cfg = cls(method=method, env=env, profile=profile, n_rooms=n_rooms, maze=maze,
                  coop=coop, sac=sac,
                  epochs=int(data.get("epochs", prof["epochs"])),
                  timesteps_per_epoch=int(data.get("timesteps_per_epoch", 5000)),
                  train_loops_per_epoch=int(data.get("train_loops_per_epoch", 1000)),
                  eval_episodes=int(data.get("eval_episodes", 20)),
                  checkpoint_every=int(data.get("checkpoint_every", 10)),
                  seed=int(data.get("seed", 0)),
                  out_dir=str(data.get("out_dir", "runs/default")))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.timesteps_per_epoch < 1 or self.train_loops_per_epoch < 0:
            raise ConfigError("timesteps_per_epoch must be positive, train loops non-negative")
        if self.eval_episodes < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval_episodes and checkpoint_every must be positive")
        if self.sac.batch_size < 256:
            warnings.warn(f"batch size {self.sac.batch_size} is below 256; the batch-wise "
                          "critic normalisation becomes noisy", UserWarning, stacklevel=3)
        if self.sac.gamma > 0.95:
            warnings.warn(f"discount {self.sac.gamma} exceeds 0.95; chained critics may "
                          "overvalue staying in a subtask", UserWarning, stacklevel=3)

    def with_changes(self, **changes) -> "RunConfig":
        d = self.to_dict()
        coop = changes.pop("coop", None)
        if coop:
            d["coop"].update(coop)
        d.update(changes)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        coop = self.coop.to_dict()
        del coop["n_subtasks"]
        if self.coop.n_subtasks == 1:
            del coop["eta"]
        return {"method": self.method, "env": self.env, "profile": self.profile,
                "n_rooms": self.n_rooms,
                "maze": dataclasses.asdict(self.maze) if self.maze is not None else None,
                "coop": coop, "sac": self.sac.to_dict(), "epochs": self.epochs,
                "timesteps_per_epoch": self.timesteps_per_epoch,
                "train_loops_per_epoch": self.train_loops_per_epoch,
                "eval_episodes": self.eval_episodes, "checkpoint_every": self.checkpoint_every,
                "seed": self.seed, "out_dir": self.out_dir}


def load_config(path: str | Path, extra_keys: Sequence[str] = ()) -> tuple[RunConfig, dict]:
    """Parse a JSON config file; returns the run config and the raw document."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw, extra_keys), raw


# -- metrics ---------------------------------------------------------------

def metric_columns(n: int) -> list[str]:
    cols = ["epoch", "env_steps", "success_rate"]
    for name in ("subtask_return", "policy_loss", "critic_loss", "alpha"):
        cols += [f"{name}_{i}" for i in range(1, n + 1)]
    return cols + ["wall_clock_s"]


class EpochMetrics(NamedTuple):
    epoch: int
    env_steps: int
    success_rate: float
    subtask_returns: list[float]
    policy_losses: list[float]
    critic_losses: list[float]
    alphas: list[float]
    wall_clock_s: float

    def row(self) -> list[str]:
        def fmt(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))
        vals = [str(self.epoch), str(self.env_steps), fmt(self.success_rate)]
        for group in (self.subtask_returns, self.policy_losses, self.critic_losses, self.alphas):
            vals += [fmt(v) for v in group]
        return vals + [f"{self.wall_clock_s:.3f}"]


# -- building blocks ---------------------------------------------------------

def make_env(cfg: RunConfig, seed: int | None):
    if cfg.env == "maze":
        return MazeEnv(cfg.maze, seed=seed)
    return PointMassReach(seed=seed)


def evaluate(agents: AgentSet, env, episodes: int, seed: int) -> tuple[float, np.ndarray]:
    """Deterministic rollouts on the raw multi-reward env.

    Returns the success rate and the mean undiscounted return of every
    subtask reward. The env is reseeded so every call sees the same starts.
    """
    returns = np.zeros(env.n_subtasks)
    successes = 0
    env.reset(seed)
    for _ in range(episodes):
        obs, n = env.reset()
        for _ in range(env.max_steps):
            agent = agents.agents[min(n, agents.n) - 1]
            res = env.step(agent.act(obs, deterministic=True))
            returns += res.rewards
            obs, n = res.obs, res.subtask
            if res.done:
                successes += bool(res.success)
                break
    return successes / episodes, returns / episodes


def _streams(seed: int) -> dict[str, int]:
    names = ("agents", "train_env", "eval_env")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {k: int(s.generate_state(1)[0]) for k, s in zip(names, kids)}


def _checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


# -- training ---------------------------------------------------------------

def run_training(cfg: RunConfig, out_dir: str | Path | None = None) -> EpochMetrics | None:
    """Train for ``cfg.epochs`` epochs, writing metrics, config, and checkpoints.

    Each epoch gathers ``timesteps_per_epoch`` environment steps, runs
    ``train_loops_per_epoch`` cooperative training iterations, then
    evaluates. Returns the final epoch's metrics (None for zero epochs).
    Raises :class:`RunFault` after writing ``fault.json`` when training
    fails numerically or the environment keeps failing.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    seeds = _streams(cfg.seed)
    base_env = make_env(cfg, seeds["train_env"])
    train_env = CompositeRewardEnv(base_env) if cfg.method == "single" else base_env
    eval_env = make_env(cfg, seeds["eval_env"])
    agents = AgentSet.build(train_env.obs_dim, train_env.act_dim, cfg.coop, cfg.sac,
                            seed=seeds["agents"])
    n_cols = cfg.n_env_subtasks
    pad = [math.nan] * (n_cols - agents.n)

    start = time.perf_counter()
    env_steps = 0
    last: EpochMetrics | None = None
    last_ckpt: str | None = None
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metric_columns(n_cols))
        fh.flush()
        for epoch in range(1, cfg.epochs + 1):
            stage = "gather"
            try:
                gathered = 0
                while gathered < cfg.timesteps_per_epoch:
                    stats = gather_episode(agents, train_env,
                                           step_budget=cfg.timesteps_per_epoch - gathered)
                    if stats.aborted:
                        log.warning("episode aborted after %d steps: %s", stats.steps, stats.error)
                        if stats.steps == 0:
                            raise RuntimeError(f"environment failed: {stats.error}")
                    gathered += stats.steps
                env_steps += gathered

                stage = "train"
                sums = np.zeros((2, agents.n))
                counts = np.zeros(agents.n)
                for _ in range(cfg.train_loops_per_epoch):
                    for i, st in enumerate(train_iteration(agents)):
                        if st["trained"]:
                            sums[:, i] += (st["policy_loss"], st["critic_loss"])
                            counts[i] += 1
                with np.errstate(invalid="ignore", divide="ignore"):
                    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

                stage = "evaluate"
                success, returns = evaluate(agents, eval_env, cfg.eval_episodes,
                                            seeds["eval_env"])
            except (FloatingPointError, RuntimeError) as exc:
                record = {"epoch": epoch, "stage": stage, "error": str(exc),
                          "node_index": getattr(exc, "node_index", None),
                          "last_checkpoint": last_ckpt, "env_steps": env_steps}
                (out / "fault.json").write_text(json.dumps(record, indent=2) + "\n")
                raise RunFault(f"run stopped in epoch {epoch} ({stage}): {exc}", record) from exc

            last = EpochMetrics(epoch, env_steps, float(success), list(returns),
                                list(means[0]) + pad, list(means[1]) + pad,
                                [a.alpha for a in agents.agents] + pad,
                                time.perf_counter() - start)
            writer.writerow(last.row())
            fh.flush()
            log.info("epoch %d steps %d success %.2f buffers %s", epoch, env_steps, success,
                     [len(b) for b in agents.buffers])
            if epoch % cfg.checkpoint_every == 0:
                last_ckpt = _checkpoint_name(epoch)
                G.save_checkpoint(out / "checkpoints" / last_ckpt, agents.state_arrays())
    return last


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    """Rows of a metrics file as floats (empty cells become NaN)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[:3] != ["epoch", "env_steps",
                                                              "success_rate"]:
            raise ValueError(f"{path}: not a metrics file")
        rows = []
        for row in reader:
            rows.append({k: (float(v) if v != "" else math.nan) for k, v in row.items()})
    return rows


def tail_success(rows: list[dict[str, float]], window: int = 10) -> float:
    if not rows:
        return math.nan
    return float(np.mean([r["success_rate"] for r in rows[-window:]]))


# -- SAC smoke run ----------------------------------------------------------

def pointmass_smoke(seed: int, max_env_steps: int = 50_000, eval_every: int = 2000,
                    eval_episodes: int = 20, warmup: int = 1000, target: float = 0.9,
                    sac: SACConfig | None = None) -> dict:
    """Plain single-agent SAC on the point-mass reach task.

    One gradient update per environment step after ``warmup`` uniformly
    random steps. Deterministic evaluation every ``eval_every`` steps; the
    run stops as soon as the success rate reaches ``target``.
    """
    from .ccp import ReplayBuffer, TransitionRecord
    from .sac import SACAgent, sac_update

    sac = sac or SACConfig(hidden_sizes=[64, 64])
    seeds = _streams(seed)
    env, eval_env = PointMassReach(seed=seeds["train_env"]), PointMassReach()
    rng = np.random.default_rng(seeds["agents"])
    agent = SACAgent(env.obs_dim, env.act_dim, sac, rng)
    buf = ReplayBuffer(max_env_steps, env.obs_dim, env.act_dim, 1)
    agents = AgentSet([agent], [buf], CoopConfig(n_subtasks=1))
    history = []
    obs, _ = env.reset()
    for step in range(1, max_env_steps + 1):
        action = rng.uniform(-1, 1, env.act_dim) if step <= warmup else agent.act(obs)
        res = env.step(action)
        buf.add(TransitionRecord(obs, action, res.rewards, res.obs, res.terminal, 1))
        obs = env.reset()[0] if res.done else res.obs
        if len(buf) >= sac.batch_size and step > warmup:
            sac_update(agent, buf.batch(buf.sample(sac.batch_size, rng), 0))
        if step % eval_every == 0:
            success, _ = evaluate(agents, eval_env, eval_episodes, seeds["eval_env"])
            history.append((step, success))
            if success >= target:
                break
    best = max((s for _, s in history), default=0.0)
    return {"seed": seed, "env_steps": history[-1][0] if history else 0,
            "success": history[-1][1] if history else 0.0, "best": best, "history": history}


# -- sweeps ---------------------------------------------------------------

def expand_grid(eta_grid: Sequence[float] | None = None,
                per_agent_grids: Sequence[Sequence[float]] | None = None) -> list[list[float]]:
    """Grid points as per-agent ratio lists; per-agent grids combine as a cartesian product."""
    if (eta_grid is None) == (per_agent_grids is None):
        raise ConfigError("give exactly one of eta_grid and per_agent_eta_grids")
    if eta_grid is not None:
        points = [[float(e)] for e in eta_grid]
        scalar = True
    else:
        points = [list(map(float, p)) for p in itertools.product(*per_agent_grids)]
        scalar = False
    if not points:
        raise ConfigError("empty cooperative-ratio grid")
    for p in points:
        for e in p:
            if not 0.0 <= e <= 1.0:
                raise ConfigError(f"cooperative ratio {e} outside [0, 1]")
    return [p[0] if scalar else p for p in points]


def _eta_label(eta) -> str:
    return "-".join(f"{e:g}" for e in np.atleast_1d(eta))


def _run_one(cfg_dict: dict, out: str) -> dict:
    """Worker body, kept free of shared state so runs can go to separate processes."""
    try:
        cfg = RunConfig.from_dict(cfg_dict)
        run_training(cfg, out)
        return {"ok": True, "tail": tail_success(read_metrics(Path(out) / "metrics.csv"))}
    except (RunFault, ConfigError, OSError, ValueError) as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def run_sweep(base: RunConfig, eta_grid: Sequence[float] | None = None,
              per_agent_grids: Sequence[Sequence[float]] | None = None,
              seeds: Sequence[int] = (0, 1, 2, 3, 4), out_dir: str | Path | None = None,
              jobs: int = 1) -> list[dict]:
    """One run per (grid point, seed) in its own directory, then a summary table.

    The summary value of a grid point is the mean over successful seeds of
    each run's mean success rate over its last 10 epochs. Failed runs are
    recorded in ``failures.json`` and in the row's ``seeds_failed`` column.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    out = Path(out_dir if out_dir is not None else base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = expand_grid(eta_grid, per_agent_grids)
    jobs_list = []
    for eta in points:
        for seed in seeds:
            d = base.to_dict()
            d["coop"]["eta"] = eta
            d["seed"] = int(seed)
            run_dir = out / f"eta_{_eta_label(eta)}" / f"seed_{seed}"
            d["out_dir"] = str(run_dir)
            jobs_list.append((eta, seed, d, str(run_dir)))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [j[2] for j in jobs_list], [j[3] for j in jobs_list]))
    else:
        results = [_run_one(d, r) for _, _, d, r in jobs_list]

    failures, summary = [], []
    for eta in points:
        tails, failed = [], 0
        for (e, seed, _, run_dir), res in zip(jobs_list, results):
            if e != eta:
                continue
            if res["ok"]:
                tails.append(res["tail"])
            else:
                failed += 1
                failures.append({"eta": eta, "seed": seed, "dir": run_dir, "error": res["error"]})
        summary.append({"method": base.method.upper(), "eta": _eta_label(eta),
                        "seeds_ok": len(tails), "seeds_failed": failed,
                        "success_rate": float(np.mean(tails)) if tails else math.nan})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", "eta", "seeds_ok", "seeds_failed", "success_rate"])
        w.writeheader()
        w.writerows(summary)
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return summary


# -- verification ---------------------------------------------------------

LEMMA_TOL = 1e-8
GRAD_TOL = 1e-4
ETAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _random_policy(rng: np.random.Generator, mdp: chain.ChainMDP, stochastic: bool) -> np.ndarray:
    if stochastic:
        return rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return rng.integers(0, mdp.n_actions, mdp.n_states)


def check_lemma1(instances: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst, checks = 0.0, 0
    for _ in range(instances):
        mdp = chain.ChainMDP.random(rng)
        policies = [_random_policy(rng, mdp, False), _random_policy(rng, mdp, True)]
        for n in range(1, mdp.n_subtasks):
            for eta in ETAS:
                for pi in policies:
                    worst = max(worst, chain.verify_lemma1(mdp, n, eta, pi))
                    checks += 1
    return {"instances": instances, "checks": checks, "worst_residual": worst,
            "tolerance": LEMMA_TOL, "passed": worst < LEMMA_TOL}


def check_eta_recovery(instances: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    checked = agreed = skipped = 0
    mismatches = []
    for k in range(instances):
        mdp = chain.ChainMDP.random(rng)
        for n in range(1, mdp.n_subtasks):
            rep = chain.verify_eta_recovery(mdp, n)
            checked += rep["checked"]
            agreed += rep["agreed"]
            skipped += rep["skipped"]
            mismatches += [dict(m, instance=k, subtask=n) for m in rep["mismatches"]]
    return {"instances": instances, "checks": checked, "agreed": agreed,
            "skipped_degenerate": skipped, "mismatches": mismatches[:20],
            "passed": agreed == checked}


def random_mlp_case(rng: np.random.Generator):
    """A random MLP (1 to 3 hidden layers, width 1 to 64), its inputs, and activation."""
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 9))] + [int(rng.integers(1, 65)) for _ in range(depth)]
    sizes.append(int(rng.integers(1, 4)))
    params = {}
    for i in range(len(sizes) - 1):
        params[f"w{i}"] = rng.normal(0.0, 1.0 / math.sqrt(sizes[i]), (sizes[i], sizes[i + 1]))
        params[f"b{i}"] = rng.normal(0.0, 0.1, sizes[i + 1])
    act = ("tanh", "softplus")[int(rng.integers(2))]
    return G.ParameterSet(params), rng.normal(size=(4, sizes[0])), act


def mlp_loss(params: G.ParameterSet, x: np.ndarray, act: str, tape: G.Tape | None = None):
    tape = tape or G.Tape()
    w = {k: tape.param(k, v) for k, v in params.items()}
    n_layers = len(params) // 2
    h = tape.const(x)
    for i in range(n_layers):
        h = G.affine(h, w[f"w{i}"], w[f"b{i}"])
        if i < n_layers - 1:
            h = G.tanh(h) if act == "tanh" else G.softplus(h)
    return tape, G.reduce_mean(G.square(h))


def mlp_loss_numpy(params: G.ParameterSet, x: np.ndarray, act: str) -> float:
    """Same loss as :func:`mlp_loss`, computed with plain numpy (the FD side of the check)."""
    n_layers = len(params) // 2
    h = x
    for i in range(n_layers):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h) if act == "tanh" else np.logaddexp(0.0, h)
    return float(np.mean(h * h))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``, maximised."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(instances: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst, coords = 0.0, 0
    for _ in range(instances):
        params, x, act = random_mlp_case(rng)
        tape, loss = mlp_loss(params, x, act)
        got = G.backward(tape, loss)
        fd = G.finite_difference_gradient(lambda p: mlp_loss_numpy(p, x, act), params,
                                          eps=1e-3, order=4)
        for k in got:
            worst = max(worst, relative_error(got[k], fd[k]))
            coords += got[k].size
    return {"instances": instances, "checks": coords, "worst_relative_error": worst,
            "tolerance": GRAD_TOL, "passed": worst < GRAD_TOL}


def run_verify(instances: int = 100, seed: int = 0) -> dict:
    """Lemma 1, ratio recovery, and gradient checks as one JSON-ready report."""
    if instances < 0:
        raise ConfigError("instance count must be non-negative")
    report = {"seed": seed, "instances": instances}
    for name, fn in (("lemma1", check_lemma1), ("eta_recovery", check_eta_recovery),
                     ("gradients", check_gradients)):
        t0 = time.perf_counter()
        rep = fn(instances, seed)
        rep["seconds"] = round(time.perf_counter() - t0, 3)
        if rep["checks"] == 0:
            rep["note"] = "0 checks"
        report[name] = rep
    report["passed"] = all(report[k]["passed"] for k in ("lemma1", "eta_recovery", "gradients"))
    return report


# -- curves ---------------------------------------------------------------

CURVE_COLUMNS = ["method", "eta", "seed", "epoch", "env_steps", "success_rate",
                 "mean_success", "min_success", "max_success", "n_seeds"]


def emit_curves(run_dirs: Iterable[str | Path], out_path: str | Path) -> dict:
    """Merge runs into one long table with per-(method, eta, epoch) seed statistics.

    A run directory needs ``config.json`` and ``metrics.csv``; anything
    missing or malformed is listed under ``skipped`` and left out.
    """
    rows, skipped = [], []
    for d in run_dirs:
        d = Path(d)
        try:
            meta = json.loads((d / "config.json").read_text())
            metrics = read_metrics(d / "metrics.csv")
            eta = meta.get("coop", {}).get("eta", "")
            label = _eta_label(eta) if eta != "" else ""
            for r in metrics:
                rows.append({"method": meta["method"], "eta": label, "seed": int(meta["seed"]),
                             "epoch": int(r["epoch"]), "env_steps": int(r["env_steps"]),
                             "success_rate": r["success_rate"]})
        except (OSError, ValueError, KeyError, TypeError) as exc:
            skipped.append({"dir": str(d), "error": f"{type(exc).__name__}: {exc}"})
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["eta"], r["epoch"]), []).append(r["success_rate"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            vals = groups[(r["method"], r["eta"], r["epoch"])]
            w.writerow(dict(r, mean_success=float(np.mean(vals)), min_success=min(vals),
                            max_success=max(vals), n_seeds=len(vals)))
    return {"rows": len(rows), "skipped": skipped}


def default_sweep_settings(raw: dict) -> dict:
    """Pull the ``sweep`` block out of a raw config document."""
    sweep = copy.deepcopy(raw.get("sweep") or {})
    unknown = set(sweep) - {"eta_grid", "per_agent_eta_grids", "seeds", "jobs"}
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    if "eta_grid" not in sweep and "per_agent_eta_grids" not in sweep:
        sweep["eta_grid"] = [round(0.1 * k, 1) for k in range(1, 10)]
    return sweep

