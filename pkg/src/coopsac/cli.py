"""``coopsac`` command line: train, sweep, verify, curves.

Exit status: 0 success, 1 run fault, 2 config error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .runner import (ConfigError, RunConfig, RunFault, default_sweep_settings, emit_curves,
                     load_config, run_sweep, run_training, run_verify)

OK, FAULT, CONFIG, VERIFY = 0, 1, 2, 3


def _config(args, extra_keys=()) -> tuple[RunConfig, dict]:
    if args.config:
        cfg, raw = load_config(args.config, extra_keys)
    else:
        cfg, raw = RunConfig.from_dict({}), {}
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return (cfg.with_changes(**changes) if changes else cfg), raw


def cmd_train(args) -> int:
    cfg, _ = _config(args)
    try:
        final = run_training(cfg)
    except RunFault as exc:
        print(f"run fault: {exc}", file=sys.stderr)
        return FAULT
    if final is not None:
        print(f"epoch {final.epoch}: success {final.success_rate:.2f} "
              f"after {final.env_steps} steps -> {cfg.out_dir}")
    return OK


def cmd_sweep(args) -> int:
    cfg, raw = _config(args, extra_keys=("sweep",))
    sweep = default_sweep_settings(raw)
    base_seed = cfg.seed
    seeds = sweep.get("seeds", [base_seed + k for k in range(5)])
    summary = run_sweep(cfg, sweep.get("eta_grid"), sweep.get("per_agent_eta_grids"), seeds,
                        cfg.out_dir, jobs=int(sweep.get("jobs", 1)))
    for row in summary:
        print(f"{row['method']} eta={row['eta']}: {row['success_rate']:.3f} "
              f"({row['seeds_ok']} ok, {row['seeds_failed']} failed)")
    return FAULT if any(r["seeds_failed"] for r in summary) else OK


def cmd_verify(args) -> int:
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(settings) - {"instances", "seed"}
        if unknown:
            raise ConfigError(f"unknown verify keys: {sorted(unknown)}")
    instances = args.instances if args.instances is not None else settings.get("instances", 100)
    seed = args.seed if args.seed is not None else settings.get("seed", 0)
    report = run_verify(int(instances), int(seed))
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(text)
    print(text, end="")
    return OK if report["passed"] else VERIFY


def cmd_curves(args) -> int:
    dirs = list(args.runs)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if set(doc) - {"runs"}:
            raise ConfigError(f"unknown curves keys: {sorted(set(doc) - {'runs'})}")
        dirs += doc.get("runs", [])
    out = Path(args.out or ".") / "curves.csv"
    rep = emit_curves(dirs, out)
    for s in rep["skipped"]:
        print(f"skipped {s['dir']}: {s['error']}", file=sys.stderr)
    print(f"{rep['rows']} rows -> {out}")
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopsac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"train": "train one configuration", "sweep": "grid over cooperative ratios",
             "verify": "tabular theorem checks and gradient checks",
             "curves": "merge run directories into one curve table"}
    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep), ("verify", cmd_verify),
                     ("curves", cmd_curves)):
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(func=fn)
        if name == "verify":
            sp.add_argument("--instances", type=int, help="random instances per check")
        if name == "curves":
            sp.add_argument("runs", nargs="*", help="run directories")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG


if __name__ == "__main__":
    sys.exit(main())
