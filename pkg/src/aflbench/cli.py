"""Command-line entry point.

    aflbench run CONFIG [--seed S] [--out-dir DIR]
    aflbench compare CONFIG [--strategies fedstaleweight,fedavg] [--seeds 1,2,3] [--out-dir DIR] [--jobs J]
    aflbench verify [--suite mechanism|staleness-oracle|bound|gradients|all]

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure,
3 failed verification property.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import config as cfgmod
from .analysis import run_report
from .engine import SimulationError, initial_parameters, prepare_data, run_simulation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "AFLBENCH_SEED"


def _err(msg: str) -> None:
    print(f"aflbench: {msg}", file=sys.stderr)


def _default_seed(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise cfgmod.ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise cfgmod.ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def execute(doc: dict, seed: Optional[int], out_dir: Path, strategy: Optional[str] = None) -> dict:
    """Run one simulation cell and write its three artifacts into ``out_dir``."""
    config = cfgmod.to_sim_config(doc, seed)
    if strategy is not None:
        config = config.replace(strategy=strategy)
    data = prepare_data(config)
    log = run_simulation(config, data)
    report = run_report(config, data, log, initial_parameters(config), doc.get("acc_target", 0.8))
    out_dir.mkdir(parents=True, exist_ok=True)
    log.to_csv(out_dir / "metrics.csv")
    _dump(out_dir / "report.json", report)
    _dump(out_dir / "resolved_config.json", cfgmod.resolved_document(config, doc))
    report["contributing_agent_ids"] = [r.contributing_agent_ids for r in log.rows]
    return report


def cmd_run(args) -> int:
    try:
        doc = cfgmod.load(args.config)
        seed = _default_seed(args.seed)
        cfgmod.to_sim_config(doc, seed)
    except cfgmod.ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_CONFIG
    try:
        report = execute(doc, seed, Path(args.out_dir))
    except SimulationError as exc:
        _err(f"simulation aborted: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any runtime fault maps to exit 2
        _err(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    print(f"wrote {report['aggregations']} aggregations to {args.out_dir}")
    return EXIT_OK


def _cell(job):
    doc, seed, out_dir, strategy = job
    return strategy, seed, execute(doc, seed, Path(out_dir), strategy)


def cmd_compare(args) -> int:
    try:
        doc = cfgmod.load(args.config)
        cmp_section = doc.get("compare", {})
        strategies = args.strategies.split(",") if args.strategies else cmp_section.get("strategies", [])
        strategies = [s.strip() for s in strategies if s.strip()]
        if len(set(strategies)) < 2:
            raise cfgmod.ConfigError(f"compare needs at least two distinct strategies, got {strategies}")
        unknown = set(strategies) - {"fedstaleweight", "fedavg"}
        if unknown:
            raise cfgmod.ConfigError(f"unknown strategies {sorted(unknown)}")
        if args.seeds:
            seeds = _int_list(args.seeds)
        elif "seeds" in cmp_section:
            seeds = list(cmp_section["seeds"])
        else:
            base = _default_seed(None)
            seeds = [base if base is not None else doc.get("master_seed", 0)]
        if not seeds:
            raise cfgmod.ConfigError("compare needs at least one seed")
        for s in seeds:
            cfgmod.to_sim_config(doc, s)
    except cfgmod.ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_CONFIG

    out = Path(args.out_dir)
    jobs = [(doc, s, str(out / "cells" / f"{st}_seed{s}"), st) for s in seeds for st in strategies]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_cell, jobs))
        else:
            results = [_cell(j) for j in jobs]
    except Exception as exc:  # noqa: BLE001
        _err(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME

    by_cell = {(st, s): r for st, s, r in results}
    pairs = []
    for s in seeds:
        orders = [by_cell[(st, s)].pop("contributing_agent_ids") for st in strategies]
        pairs.append({
            "seed": s,
            "event_order_identical": all(o == orders[0] for o in orders[1:]),
            "fairness": {st: by_cell[(st, s)]["fairness"] for st in strategies},
            "max_observed_staleness": {st: by_cell[(st, s)]["max_observed_staleness"] for st in strategies},
        })
    summary = {}
    for st in strategies:
        rows = [by_cell[(st, s)]["fairness"] for s in seeds if by_cell[(st, s)]["fairness"]]
        if rows:
            summary[st] = {k: sum(r[k] for r in rows) / len(rows)
                           for k in ("final_global_acc", "final_fast_acc", "final_slow_acc", "acc_gap")}
    comparison = {
        "strategies": strategies,
        "seeds": seeds,
        "per_seed": pairs,
        "mean_fairness": summary,
        "cells": {f"{st}_seed{s}": by_cell[(st, s)] for st in strategies for s in seeds},
    }
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "comparison.json", comparison)
    print(f"ran {len(jobs)} cells; wrote {out / 'comparison.json'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = run_suites(names)
    print("all selected suites passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aflbench", description="Buffered asynchronous FL simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one simulation")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help=f"master seed (falls back to ${SEED_ENV})")
    run.add_argument("--out-dir", default="out")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="paired strategy comparison over seeds")
    cmp_.add_argument("config")
    cmp_.add_argument("--strategies", default=None, help="comma-separated, e.g. fedstaleweight,fedavg")
    cmp_.add_argument("--seeds", default=None, help="comma-separated integers")
    cmp_.add_argument("--out-dir", default="out")
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.set_defaults(func=cmd_compare)

    ver = sub.add_parser("verify", help="run the property suites")
    ver.add_argument("--suite", choices=["mechanism", "staleness-oracle", "bound", "gradients", "all"], default="all")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
