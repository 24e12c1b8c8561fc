"""Command-line entry point: simulate, sweep, solve, report."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .errors import DistSlamError
from .metrics import aggregate
from .posegraph import PoseGraph, write_g2o
from .runner import run_scenario, solve, summarize_dir, sweep


def _load_config(name: str) -> cfgmod.ScenarioConfig:
    path = Path(name)
    if not path.exists() and (cfgmod.SCENARIO_DIR / f"{name}.yaml").exists():
        return cfgmod.builtin(name)
    return cfgmod.load(path)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _values(text: str) -> list:
    items = [t.strip() for t in text.replace(" ", ",").split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list of values")
    return items


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4g}"


def _print_aggregate(label, agg):
    parts = [f"{m}={_fmt(mean)}±{_fmt(std)}" for m, (mean, std) in
             ((k, v) for k, v in agg.items() if k != "runs")]
    print(f"{label} runs={agg['runs']} " + " ".join(parts))


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.runs is not None:
        cfg = replace(cfg, runs=args.runs)
    out = Path(args.out or cfg.output_dir)
    reports = run_scenario(cfg, out)
    failed = [r for r in reports if r.status != "ok"]
    for r in failed:
        print(f"run {r.run}: {r.status}", file=sys.stderr)
    _print_aggregate(cfg.name, aggregate(reports))
    print(f"wrote {out}")
    return 1 if len(failed) == len(reports) else 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.runs is not None:
        cfg = replace(cfg, runs=args.runs)
    out = Path(args.out or Path(cfg.output_dir) / f"sweep_{args.param}")
    rows = sweep(cfg, args.param, args.values, out, write_runs=args.write_runs)
    for value, reports in rows:
        _print_aggregate(f"{args.param}={value}", aggregate(reports))
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_solve(args) -> int:
    res = solve(args.input, args.pcm_threshold, pcm_enabled=not args.no_pcm)
    for (a, b), outcome in res.outcomes.items():
        cert = "" if outcome.clique.certified else " (heuristic clique)"
        print(f"robots {a}-{b}: {len(outcome.inliers)} accepted, {len(outcome.rejected)} rejected{cert}")
    out = Path(args.output)
    graph = PoseGraph(owner=min(res.graphs), poses=dict(sorted(res.pgo.poses.items())))
    for g in res.graphs.values():
        graph.odometry.extend(g.odometry)
    graph.loop_closures.extend(res.inliers)
    write_g2o(graph, out)
    print(f"backend bytes {res.pgo.bytes}; wrote {out}")
    return 0


def cmd_report(args) -> int:
    rows = summarize_dir(args.dir)
    if not rows:
        print("no rows", file=sys.stderr)
        return 1
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(str(r[c]) for c in cols))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distslam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario end to end")
    s.add_argument("--config", required=True, help="scenario YAML file or built-in name (e.g. 'standard')")
    s.add_argument("--seed", type=_u64, help="override the base seed")
    s.add_argument("--runs", type=int, help="override the number of runs")
    s.add_argument("--out", help="output directory (default: output_dir from the config)")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="paired parameter sweep")
    w.add_argument("--config", required=True)
    w.add_argument("--param", required=True, choices=sorted(cfgmod.SWEEP_PARAMETERS))
    w.add_argument("--values", required=True, type=_values, help="comma-separated values")
    w.add_argument("--seed", type=_u64)
    w.add_argument("--runs", type=int)
    w.add_argument("--out")
    w.add_argument("--write-runs", action="store_true", help="also write per-run files for every value")
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("solve", help="PCM plus distributed PGO on g2o files")
    g.add_argument("--input", required=True, nargs="+", help="one or more g2o files")
    g.add_argument("--pcm-threshold", type=float, default=0.01)
    g.add_argument("--no-pcm", action="store_true", help="accept every inter-robot edge")
    g.add_argument("--output", default="solution.g2o")
    g.set_defaults(func=cmd_solve)

    r = sub.add_parser("report", help="summarize a simulate or sweep output directory")
    r.add_argument("--dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DistSlamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
