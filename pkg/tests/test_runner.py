import csv
import dataclasses
import json
import math
import warnings

import numpy as np
import pytest

from coopsac import cli, runner
from coopsac import grad as G
from coopsac.maze import MazeSpec
from coopsac.runner import (ConfigError, RunConfig, RunFault, emit_curves, expand_grid,
                            metric_columns, read_metrics, run_sweep, run_training, run_verify,
                            tail_success)

SHORT_MAZE = dataclasses.asdict(MazeSpec.generate(2, room_width=6.0, max_steps=40))


def tiny(**over):
    d = {"maze": SHORT_MAZE, "epochs": 2, "timesteps_per_epoch": 150,
         "train_loops_per_epoch": 3, "eval_episodes": 2,
         "sac": {"hidden_sizes": [8]}, "coop": {"min_buffer_fill": 100}}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = dict(d[k], **v)
        else:
            d[k] = v
    return d


def masked_rows(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return [r[:-1] for r in rows]  # drop wall_clock_s


# configuration

def test_defaults_follow_hyperparameter_table():
    cfg = RunConfig.from_dict({})
    assert (cfg.timesteps_per_epoch, cfg.train_loops_per_epoch, cfg.eval_episodes) == (5000,
                                                                                      1000, 20)
    assert (cfg.sac.gamma, cfg.sac.batch_size, cfg.sac.tau) == (0.95, 256, 0.005)
    assert cfg.coop.buffer_capacity == 1_000_000 and cfg.coop.etas == [0.1]
    assert cfg.maze.room_width == 6.0 and cfg.maze.max_steps == 300 and cfg.epochs == 30


def test_full_profile():
    cfg = RunConfig.from_dict({"profile": "full"})
    assert cfg.maze.room_width == 10.0 and cfg.maze.max_steps == 1000 and cfg.epochs == 100
    assert cfg.sac.hidden_sizes == [256, 256]


@pytest.mark.parametrize("doc", [
    {"colour": 1}, {"sac": {"learning": 1}}, {"coop": {"blend": 1}}, {"coop": {"n_subtasks": 2}},
    {"maze": dict(SHORT_MAZE, extra=1)}, {"method": "ppo"}, {"env": "atari"},
    {"profile": "huge"}, {"method": "naive", "coop": {"eta": 0.5}}, {"epochs": -1},
    {"coop": {"eta": 1.5}}, {"sac": {"gamma": 1.0}},
])
def test_bad_configs_are_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_naive_is_csac_with_unit_ratios():
    naive = RunConfig.from_dict({"method": "naive", "n_rooms": 3}).to_dict()
    csac = RunConfig.from_dict({"method": "csac", "n_rooms": 3, "coop": {"eta": 1.0}}).to_dict()
    assert naive.pop("method") == "naive" and csac.pop("method") == "csac"
    assert naive == csac


def test_single_uses_one_agent():
    cfg = RunConfig.from_dict({"method": "single", "n_rooms": 3})
    assert cfg.coop.n_subtasks == 1 and cfg.n_env_subtasks == 3


def test_per_agent_ratios():
    cfg = RunConfig.from_dict({"n_rooms": 3, "coop": {"eta": [0.2, 0.7]}})
    assert cfg.coop.etas == [0.2, 0.7]


def test_guidance_warnings():
    with pytest.warns(UserWarning, match="batch size"):
        RunConfig.from_dict({"sac": {"batch_size": 64}})
    with pytest.warns(UserWarning, match="discount"):
        RunConfig.from_dict({"sac": {"gamma": 0.99}})
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        RunConfig.from_dict({})


def test_config_round_trip():
    cfg = RunConfig.from_dict(tiny(seed=4, n_rooms=2))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


# training runs

def test_zero_epochs_writes_header_only(tmp_path):
    assert run_training(RunConfig.from_dict(tiny(epochs=0)), tmp_path) is None
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [metric_columns(2)]
    assert list((tmp_path / "checkpoints").iterdir()) == []


def test_metrics_schema_and_checkpoints(tmp_path):
    cfg = RunConfig.from_dict(tiny(epochs=3, checkpoint_every=2))
    final = run_training(cfg, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3] and final.epoch == 3
    assert [r["env_steps"] for r in rows] == [150, 300, 450]
    assert all(0.0 <= r["success_rate"] <= 1.0 for r in rows)
    assert math.isnan(rows[0]["critic_loss_1"])  # buffer 1 not yet at the fill threshold
    assert not math.isnan(rows[2]["critic_loss_1"])
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0002.ckpt"]
    arrays = G.load_checkpoint(tmp_path / "checkpoints" / "epoch_0002.ckpt")
    assert any(k.startswith("agent2/") for k in arrays)


def test_every_method_shares_the_schema(tmp_path):
    headers = set()
    for method in ("csac", "naive", "single"):
        run_training(RunConfig.from_dict(tiny(method=method, epochs=1)), tmp_path / method)
        with open(tmp_path / method / "metrics.csv") as fh:
            header, row = list(csv.reader(fh))
        headers.add(tuple(header))
        assert len(row) == len(header)
    assert headers == {tuple(metric_columns(2))}


def test_same_seed_same_metrics(tmp_path):
    for name in ("a", "b"):
        run_training(RunConfig.from_dict(tiny(seed=3, checkpoint_every=2)), tmp_path / name)
    assert masked_rows(tmp_path / "a/metrics.csv") == masked_rows(tmp_path / "b/metrics.csv")
    ck = "checkpoints/epoch_0002.ckpt"
    assert (tmp_path / "a" / ck).read_bytes() == (tmp_path / "b" / ck).read_bytes()


def test_different_seed_different_metrics(tmp_path):
    for seed in (0, 1):
        run_training(RunConfig.from_dict(tiny(seed=seed)), tmp_path / str(seed))
    assert masked_rows(tmp_path / "0/metrics.csv") != masked_rows(tmp_path / "1/metrics.csv")


def test_naive_run_matches_csac_with_unit_ratio(tmp_path):
    run_training(RunConfig.from_dict(tiny(method="naive")), tmp_path / "n")
    run_training(RunConfig.from_dict(tiny(coop={"eta": 1.0})), tmp_path / "c")
    assert masked_rows(tmp_path / "n/metrics.csv") == masked_rows(tmp_path / "c/metrics.csv")


def test_pointmass_run(tmp_path):
    run_training(RunConfig.from_dict(tiny(env="pointmass", maze=None, method="single")),
                 tmp_path)
    assert read_metrics(tmp_path / "metrics.csv")[-1]["epoch"] == 2


def test_numeric_fault_keeps_last_checkpoint(tmp_path, monkeypatch):
    real = runner.train_iteration
    calls = {"n": 0}

    def flaky(agents):
        calls["n"] += 1
        if calls["n"] > 4:
            raise G.NumericFault("agent 1: non-finite value", 17)
        return real(agents)

    monkeypatch.setattr(runner, "train_iteration", flaky)
    cfg = RunConfig.from_dict(tiny(epochs=3, checkpoint_every=1, train_loops_per_epoch=3))
    with pytest.raises(RunFault) as info:
        run_training(cfg, tmp_path)
    record = json.loads((tmp_path / "fault.json").read_text())
    assert record == info.value.record
    assert (record["epoch"], record["stage"], record["node_index"]) == (2, "train", 17)
    assert record["last_checkpoint"] == "epoch_0001.ckpt"
    G.load_checkpoint(tmp_path / "checkpoints" / record["last_checkpoint"])
    assert len(read_metrics(tmp_path / "metrics.csv")) == 1


def test_environment_that_never_steps_is_a_fault(tmp_path, monkeypatch):
    class Broken:
        obs_dim, act_dim, n_subtasks, max_steps = 2, 1, 1, 5

        def reset(self, seed=None):
            raise RuntimeError("no simulator")

    monkeypatch.setattr(runner, "make_env", lambda cfg, seed: Broken())
    with pytest.raises(RunFault, match="gather"):
        run_training(RunConfig.from_dict(tiny(env="pointmass", maze=None, method="single")),
                     tmp_path)


# sweeps

def test_expand_grid():
    assert expand_grid([0.1, 0.5]) == [0.1, 0.5]
    assert expand_grid(per_agent_grids=[[0.1, 0.5], [0.1, 0.5]]) == [
        [0.1, 0.1], [0.1, 0.5], [0.5, 0.1], [0.5, 0.5]]
    for bad in ({}, {"eta_grid": []}, {"eta_grid": [2.0]},
                {"eta_grid": [0.1], "per_agent_grids": [[0.1]]}):
        with pytest.raises(ConfigError):
            expand_grid(**bad)


def test_default_sweep_grid_has_nine_points():
    grid = runner.default_sweep_settings({})["eta_grid"]
    assert grid == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def test_single_point_sweep_equals_run_tail(tmp_path):
    base = RunConfig.from_dict(tiny(epochs=3))
    summary = run_sweep(base, [0.3], seeds=[2], out_dir=tmp_path)
    rows = read_metrics(tmp_path / "eta_0.3" / "seed_2" / "metrics.csv")
    assert len(summary) == 1 and summary[0]["seeds_ok"] == 1
    assert summary[0]["success_rate"] == tail_success(rows)
    with open(tmp_path / "summary.csv") as fh:
        assert next(csv.reader(fh)) == ["method", "eta", "seeds_ok", "seeds_failed",
                                        "success_rate"]


def test_per_agent_sweep_directories(tmp_path):
    base = RunConfig.from_dict(dict(tiny(epochs=1), n_rooms=3, maze=None,
                                    timesteps_per_epoch=20, eval_episodes=1))
    summary = run_sweep(base, per_agent_grids=[[0.1, 0.5], [0.1, 0.5]], seeds=[0],
                        out_dir=tmp_path)
    assert [r["eta"] for r in summary] == ["0.1-0.1", "0.1-0.5", "0.5-0.1", "0.5-0.5"]
    cfg = json.loads((tmp_path / "eta_0.5-0.1" / "seed_0" / "config.json").read_text())
    assert cfg["coop"]["eta"] == [0.5, 0.1]


def test_sweep_records_failures_and_continues(tmp_path, monkeypatch):
    real = runner.run_training

    def sometimes(cfg, out=None):
        if cfg.seed == 1:
            raise RunFault("boom", {})
        return real(cfg, out)

    monkeypatch.setattr(runner, "run_training", sometimes)
    summary = run_sweep(RunConfig.from_dict(tiny(epochs=1)), [0.1], seeds=[0, 1],
                        out_dir=tmp_path)
    assert (summary[0]["seeds_ok"], summary[0]["seeds_failed"]) == (1, 1)
    failures = json.loads((tmp_path / "failures.json").read_text())
    assert [f["seed"] for f in failures] == [1] and "boom" in failures[0]["error"]


# verification

def test_verify_small():
    rep = run_verify(3, seed=1)
    assert rep["passed"]
    assert rep["lemma1"]["worst_residual"] < 1e-8
    assert rep["gradients"]["worst_relative_error"] < 1e-4
    assert rep["eta_recovery"]["agreed"] == rep["eta_recovery"]["checks"] > 0


def test_verify_zero_instances_is_vacuous():
    rep = run_verify(0)
    assert rep["passed"]
    for k in ("lemma1", "eta_recovery", "gradients"):
        assert rep[k]["checks"] == 0 and rep[k]["note"] == "0 checks"


def test_relative_error_floor():
    assert runner.relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)
    assert runner.relative_error(np.array([2.0]), np.array([2.0002])) == pytest.approx(1e-4,
                                                                                     rel=1e-3)


# curves

def fake_run(path, seed, successes, method="csac", eta=0.1):
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps({"method": method, "seed": seed,
                                                  "coop": {"eta": eta}}))
    with open(path / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metric_columns(1))
        for i, s in enumerate(successes, start=1):
            w.writerow([i, 5000 * i, s] + [""] * 4 + ["1.0"])


def read_curves(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_curves_one_run(tmp_path):
    fake_run(tmp_path / "r", 0, [0.0, 0.5, 1.0])
    rep = emit_curves([tmp_path / "r"], tmp_path / "out.csv")
    rows = read_curves(tmp_path / "out.csv")
    assert rep["rows"] == len(rows) == 3 and rows[0]["eta"] == "0.1"


def test_curves_across_seeds(tmp_path):
    dirs = []
    for seed in range(5):
        fake_run(tmp_path / str(seed), seed, [0.1 * seed, 0.2 * seed])
        dirs.append(tmp_path / str(seed))
    emit_curves(dirs, tmp_path / "out.csv")
    rows = [r for r in read_curves(tmp_path / "out.csv") if r["epoch"] == "2"]
    assert len(rows) == 5
    for r in rows:
        assert float(r["mean_success"]) == pytest.approx(0.4)
        assert (float(r["min_success"]), float(r["max_success"])) == (0.0, pytest.approx(0.8))
        assert r["n_seeds"] == "5"


def test_curves_empty_and_malformed(tmp_path):
    assert emit_curves([], tmp_path / "e.csv")["rows"] == 0
    with open(tmp_path / "e.csv") as fh:
        assert list(csv.reader(fh)) == [runner.CURVE_COLUMNS]
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "config.json").write_text("{}")
    (tmp_path / "bad" / "metrics.csv").write_text("nonsense\n")
    rep = emit_curves([tmp_path / "bad", tmp_path / "missing"], tmp_path / "m.csv")
    assert rep["rows"] == 0 and len(rep["skipped"]) == 2


# command line

def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_cli_train_and_curves(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", tiny(epochs=1))
    assert cli.main(["train", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "r")]) == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["seed"] == 2
    assert cli.main(["curves", str(tmp_path / "r"), "--out", str(tmp_path / "cv")]) == 0
    assert len(read_curves(tmp_path / "cv" / "curves.csv")) == 1


def test_cli_config_error(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"bogus": 1})
    assert cli.main(["train", "--config", cfg]) == cli.CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "absent.json")]) == cli.CONFIG
    assert cli.main(["sweep", "--config", write(tmp_path / "s.json", {"sweep": {"x": 1}})]) == 2


def test_cli_run_fault(tmp_path, monkeypatch, capsys):
    def fail(cfg):
        raise RunFault("stopped", {})

    monkeypatch.setattr(cli, "run_training", fail)
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.FAULT


def test_cli_verify_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["verify", "--instances", "1", "--out", str(tmp_path)]) == cli.OK
    assert json.loads((tmp_path / "verify.json").read_text())["passed"]
    monkeypatch.setattr(cli, "run_verify", lambda n, s: {"passed": False})
    assert cli.main(["verify", "--instances", "1"]) == cli.VERIFY


def test_cli_sweep(tmp_path, capsys):
    doc = dict(tiny(epochs=1), sweep={"eta_grid": [0.2], "seeds": [0]})
    assert cli.main(["sweep", "--config", write(tmp_path / "s.json", doc),
                     "--out", str(tmp_path / "sw")]) == 0
    assert "CSAC eta=0.2" in capsys.readouterr().out
