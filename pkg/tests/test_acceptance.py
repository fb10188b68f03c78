"""Acceptance gates. Each test prints one PASS/FAIL line for its criterion.

Criteria 7 and 8 train six desk-profile maze runs and only run with
``--nightly`` (or COOPSAC_NIGHTLY=1). Set COOPSAC_NIGHTLY_DIR to keep those
runs between sessions; a finished run whose stored config matches is reused.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coopsac.ccp import normalize_q_over_batch
from coopsac.maze import MazeEnv, MazeSpec, RobotState, reward_vector
from coopsac.runner import (RunConfig, check_eta_recovery, check_gradients, check_lemma1,
                            pointmass_smoke, read_metrics, run_training, tail_success)

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    return emit


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def test_criterion_1_lemma1(report):
    rep, secs = timed(check_lemma1, 100, 2024)
    ok = rep["passed"] and rep["worst_residual"] < 1e-8 and secs < 60 and rep["checks"] > 0
    report(1, ok, f"{rep['checks']} checks, worst residual {rep['worst_residual']:.2e} "
                  f"(< 1e-8), {secs:.1f}s (< 60s)")
    assert ok


def test_criterion_2_eta_recovery(report):
    rep, secs = timed(check_eta_recovery, 100, 2024)
    ok = rep["agreed"] == rep["checks"] > 0 and secs < 60
    report(2, ok, f"{rep['agreed']}/{rep['checks']} non-degenerate states agree, "
                  f"{rep['skipped_degenerate']} degenerate skipped, {secs:.1f}s (< 60s)")
    assert ok, rep["mismatches"]


def test_criterion_3_gradients(report):
    rep, secs = timed(check_gradients, 100, 2024)
    ok = rep["worst_relative_error"] < 1e-4 and secs < 60
    report(3, ok, f"100 random MLPs, {rep['checks']} coordinates, worst relative error "
                  f"{rep['worst_relative_error']:.2e} (< 1e-4), {secs:.1f}s (< 60s)")
    assert ok


def test_criterion_4_normalization(report):
    seen = {"ranged": 0, "flat": 0}

    @settings(max_examples=1000, deadline=None)
    @given(arrays(np.float64, st.integers(1, 256),
                  elements=st.floats(-1e6, 1e6, allow_subnormal=False)),
           st.booleans())
    def prop(q, flat):
        if flat:
            q = np.full_like(q, q[0])
        out = normalize_q_over_batch(q, epsilon=1e-8, fallback=0.5)
        assert np.all((out >= 0.0) & (out <= 1.0))
        if q.max() - q.min() >= 1e-8:
            seen["ranged"] += 1
            assert out.min() == 0.0 and out.max() == 1.0
            assert out[np.argmax(q)] == out.max()
            order = np.argsort(q, kind="stable")
            assert np.all(np.diff(out[order]) >= 0.0)
        else:
            seen["flat"] += 1
            assert np.all(out == 0.5)

    try:
        prop()
        ok, detail = True, ""
    except AssertionError as exc:
        ok, detail = False, f" counterexample: {exc}"
    report(4, ok, f"{seen['ranged']} ranged and {seen['flat']} flat batches: outputs in "
                  f"[0,1], 0 and 1 attained, flat -> fallback, argmax and order kept{detail}")
    assert ok


def _room_oracle(spec, x, y):
    for k, d in enumerate(spec.dead_end_doors, start=1):
        wall = k * spec.room_width
        if wall <= x <= wall + spec.dead_end_depth and d < y < d + spec.door_width:
            return k
    return min(int(x // spec.room_width) + 1, spec.n_rooms)


def _reachable_states(spec, count, rng):
    """Half from long random rollouts, half uniform (walls have no thickness, so
    every point of the maze's bounding box is free space reachable through the
    doors)."""
    states = []
    env = MazeEnv(spec, seed=int(rng.integers(2**31)))
    env.reset()
    while len(states) < count // 2:
        if rng.uniform() < 0.01:
            env.state = RobotState(*rng.uniform([0.05, 0.05, -math.pi],
                                                [spec.goal_x - 0.05, spec.room_height - 0.05,
                                                 math.pi]))
        if env.step(rng.uniform(-1, 1, 2)).done:
            env.reset()
        states.append(env.state)
    xy = rng.uniform([0.0, 0.0], [spec.goal_x, spec.room_height], (count - len(states), 2))
    return states + [RobotState(x, y, 0.0) for x, y in xy]


def test_criterion_5_composite_reward(report):
    rng = np.random.default_rng(5)
    worst, total = 0.0, 0
    for n_rooms in (2, 4):
        spec = MazeSpec.generate(n_rooms, room_width=6.0, max_steps=300)
        for s in _reachable_states(spec, 5000, rng):
            room = _room_oracle(spec, s.x, s.y)
            own = min(max((s.x - (room - 1) * spec.room_width) / spec.room_width, 0.0), 1.0)
            worst = max(worst, abs(reward_vector(s, spec).sum() - ((room - 1) + own)))
            total += 1
    ok = worst <= 1e-12 and total == 10_000
    report(5, ok, f"{total} states, worst |sum r - (room-1) - r_room| = {worst:.1e} (<= 1e-12)")
    assert ok


def test_criterion_6_sac_smoke(report):
    t0 = time.perf_counter()
    runs = [pointmass_smoke(seed) for seed in SEEDS]
    secs = time.perf_counter() - t0
    med = float(np.median([r["success"] for r in runs]))
    within = all(r["env_steps"] <= 50_000 for r in runs)
    ok = med >= 0.9 and within and secs < 600
    detail = ", ".join(f"seed {r['seed']}: {r['success']:.2f} at {r['env_steps']} steps"
                       for r in runs)
    report(6, ok, f"median success {med:.2f} (>= 0.9) within 5e4 steps; {detail}; "
                  f"{secs:.0f}s (< 600s)")
    assert ok


def _desk_config(method, seed, out):
    doc = {"method": method, "seed": seed, "out_dir": str(out)}
    if method == "csac":
        doc["coop"] = {"eta": 0.1}
    return RunConfig.from_dict(doc)


def _finished(cfg, out):
    try:
        stored = json.loads((out / "config.json").read_text())
        rows = read_metrics(out / "metrics.csv")
    except (OSError, ValueError):
        return None
    if stored != json.loads(json.dumps(cfg.to_dict())) or len(rows) != cfg.epochs:
        return None
    return rows


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = Path(os.environ.get("COOPSAC_NIGHTLY_DIR") or tmp_path_factory.mktemp("nightly"))
    results = {}
    for method in ("csac", "naive"):
        for seed in SEEDS:
            out = root / f"{method}_seed{seed}"
            cfg = _desk_config(method, seed, out)
            rows = _finished(cfg, out)
            if rows is None:
                run_training(cfg, out)
                rows = read_metrics(out / "metrics.csv")
            results[method, seed] = [r["success_rate"] for r in rows]
    return results


@pytest.mark.nightly
def test_criterion_7_trend(report, desk_runs):
    final = {m: [round(tail_success([{"success_rate": s} for s in desk_runs[m, seed]]), 3)
                 for seed in SEEDS] for m in ("csac", "naive")}
    csac, naive = float(np.median(final["csac"])), float(np.median(final["naive"]))
    ok = csac >= 0.8 and csac > naive
    report(7, ok, f"median final success (last-10-epoch mean) CSAC(eta=0.1) {csac:.3f} "
                  f"(>= 0.8) vs Naive {naive:.3f}; per seed CSAC {final['csac']}, "
                  f"Naive {final['naive']}")
    assert ok


def _windows(successes, width=10):
    return [float(np.mean(successes[i:i + width])) for i in range(len(successes) - width + 1)]


@pytest.mark.nightly
def test_criterion_8_naive_decay(report, desk_runs):
    gaps = []
    for seed in SEEDS:
        w = _windows(desk_runs["naive", seed])
        gaps.append(max(w) - w[-1])
    ok = float(np.median(gaps)) > 0.0
    # advisory gate: reported, never fails the suite
    report(8, ok, f"advisory: Naive best-window minus final-window success per seed "
                  f"{[round(g, 3) for g in gaps]}, median {np.median(gaps):.3f} (> 0)")


def test_criterion_9_determinism(report, tmp_path):
    files = []
    for name in ("a", "b"):
        cfg = RunConfig.from_dict({"method": "csac", "seed": 7, "epochs": 2,
                                   "checkpoint_every": 1, "out_dir": str(tmp_path / name)})
        run_training(cfg)
        lines = (tmp_path / name / "metrics.csv").read_text().splitlines()
        masked = [line.rsplit(",", 1)[0] for line in lines]  # wall_clock_s is last
        ckpts = [p.read_bytes() for p in sorted((tmp_path / name / "checkpoints").iterdir())]
        files.append((masked, ckpts))
    (ma, ca), (mb, cb) = files
    ok = ma == mb and ca == cb and len(ma) == 3 and len(ca) == 2
    report(9, ok, f"two desk runs (2 epochs, seed 7): metrics identical except wall_clock_s: "
                  f"{ma == mb}; {len(ca)} checkpoints byte-identical: {ca == cb}")
    assert ok
