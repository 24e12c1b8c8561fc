"""End-to-end runs: world, rendezvous, PCM, distributed PGO, metrics, files."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels, se3
from .config import SWEEP_PARAMETERS, ScenarioConfig, dump
from .errors import DistSlamError, UnknownParameter
from .frontend import MissionResult, simulate_mission
from .metrics import REPORT_COLUMNS, RunReport, aggregate, ate, rejection_stats, report_row, write_reports, write_sweep
from .network import Network, NetworkConfig, static_positions, write_envelope_log, write_exchange_log
from .pcm import PcmConfig, select_inliers_all
from .pgo import PgoConfig, PgoResult, centralized_transfer_bytes, run_distributed_pgo
from .posegraph import PoseGraph, read_g2o, split_by_robot, write_g2o
from .world import World, generate

log = logging.getLogger(__name__)

CANDIDATE_COLUMNS = ["id", "source", "target", "true_inlier", "correspondences", "round", "min_sq_distance",
                     "accepted"]


def derive_seed(base: int, run: int) -> int:
    """Per-run 64-bit seed; the same run index always gets the same world."""
    return int(np.random.SeedSequence([int(base), int(run)]).generate_state(1, dtype=np.uint64)[0])


def simulate_frontend(cfg: ScenarioConfig, seed: int) -> tuple[World, MissionResult]:
    world = generate(replace(cfg.world, seed=seed))
    net = Network(cfg.network, world.positions)
    return world, simulate_mission(world, net, cfg.frontend, seed)


def rally_network(robot_ids, cfg: NetworkConfig, start_round: int = 0) -> Network:
    """All robots gathered at one point for the end-of-mission optimization."""
    return Network(cfg, static_positions({r: (0.0, 0.0, 0.0) for r in robot_ids}), start_round=start_round)


def odometry_only(world: World) -> dict:
    """Dead reckoning of every robot from its true start pose."""
    out = {}
    for r in world.robots:
        start = world.gt(min(k for k in world.ground_truth if k.robot_id == r))
        out.update({k: se3.compose(start, p) for k, p in world.dead_reckoning(r).items()})
    return out


@dataclass
class RunResult:
    report: RunReport
    world: World | None = None
    mission: MissionResult | None = None
    outcomes: dict | None = None
    pgo: PgoResult | None = None


def evaluate(cfg: ScenarioConfig, world: World, mission: MissionResult, run: int, seed: int) -> RunResult:
    graphs = mission.graphs()
    edges = [c.edge for c in mission.candidates]
    outcomes = select_inliers_all(edges, graphs, cfg.pcm)
    accepted_ids = {id(e) for o in outcomes.values() for e in o.inliers}
    inliers = [e for e in edges if id(e) in accepted_ids]
    stats = rejection_stats([c.true_inlier for c in mission.candidates],
                            [id(c.edge) in accepted_ids for c in mission.candidates])
    net = rally_network(world.robots, cfg.network, mission.network.round)
    result = run_distributed_pgo(graphs, inliers, cfg.pgo, net)
    bytes_front = mission.network.total_bytes()
    bytes_back = net.total_bytes()
    report = RunReport(
        run=run, seed=seed,
        ate_m=ate(result.poses, world.ground_truth),
        odometry_ate_m=ate(odometry_only(world), world.ground_truth),
        pct_outliers_rejected=stats.pct_outliers_rejected,
        pct_inliers_rejected=stats.pct_inliers_rejected,
        inliers_accepted=stats.inliers_accepted, inliers_rejected=stats.inliers_rejected,
        outliers_accepted=stats.outliers_accepted, outliers_rejected=stats.outliers_rejected,
        candidates=len(edges),
        bytes_total=bytes_front + bytes_back, bytes_frontend=bytes_front, bytes_backend=bytes_back,
        bytes_centralized_baseline=centralized_transfer_bytes(graphs, inliers, net.byte_model),
        rotation_iterations=result.rotation_report.iterations,
        pose_iterations=sum(r.iterations for r in result.pose_reports),
        converged=result.rotation_report.converged and all(r.converged for r in result.pose_reports),
    )
    return RunResult(report, world, mission, outcomes, result)


def failed_report(run: int, seed: int, exc: Exception) -> RunReport:
    nan = float("nan")
    return RunReport(run, seed, nan, nan, None, None, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, False,
                     status=f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))


def _min_distances(outcome) -> list:
    d2 = outcome.graph.sq_distances
    n = len(outcome.candidates)
    if d2 is None or n < 2:
        return [None] * n
    masked = d2 + np.diag(np.full(n, np.inf))
    return [float(v) for v in masked.min(axis=1)]


def write_candidates(res: RunResult, path):
    lookup = {}
    for outcome in res.outcomes.values():
        for e, dmin, acc in zip(outcome.candidates, _min_distances(outcome), outcome.accepted):
            lookup[id(e)] = (dmin, bool(acc))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_COLUMNS)
        for c in res.mission.candidates:
            dmin, acc = lookup[id(c.edge)]
            w.writerow([c.id, c.edge.source, c.edge.target, int(c.true_inlier), c.correspondences, c.round,
                        "NA" if dmin is None else repr(dmin), int(acc)])


def write_run_outputs(res: RunResult, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    write_candidates(res, run_dir / "candidates.csv")
    write_envelope_log(res.mission.network.log, run_dir / "frontend_envelopes.csv")
    write_exchange_log(res.mission.network.log, run_dir / "frontend_exchange.csv")
    write_exchange_log(res.pgo.log, run_dir / "backend_exchange.csv")
    write_reports([res.report], run_dir / "report.csv")
    write_g2o(PoseGraph(owner=0, poses=dict(sorted(res.pgo.poses.items()))), run_dir / "estimate.g2o",
              vertices_only=True)
    write_g2o(res.world.ground_truth_graph(), run_dir / "ground_truth.g2o", vertices_only=True)


def manifest(cfg: ScenarioConfig, extra: dict | None = None) -> dict:
    doc = {
        "package": "distslam",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "kernel_backend": kernels.BACKEND,
        "config": cfg.to_dict(),
    }
    doc.update(extra or {})
    return doc


def write_manifest(cfg: ScenarioConfig, out_dir: Path, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest(cfg, extra), indent=2, sort_keys=True) + "\n")
    (out_dir / "config.yaml").write_text(dump(cfg))


class FrontendCache:
    """Front-end results keyed by run seed and every config that shapes them."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: ScenarioConfig, seed: int):
        key = (seed, cfg.world, cfg.network, cfg.frontend)
        if key not in self._store:
            self._store[key] = simulate_frontend(cfg, seed)
        return self._store[key]


def run_once(cfg: ScenarioConfig, run: int, cache: FrontendCache | None = None) -> RunResult:
    seed = derive_seed(cfg.seed, run)
    try:
        world, mission = cache.get(cfg, seed) if cache is not None else simulate_frontend(cfg, seed)
        return evaluate(cfg, world, mission, run, seed)
    except (DistSlamError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        log.error("run %d (seed %d) failed: %s", run, seed, exc)
        return RunResult(failed_report(run, seed, exc))


def run_scenario(cfg: ScenarioConfig, out_dir=None, cache: FrontendCache | None = None,
                 write_runs: bool = True) -> list[RunReport]:
    """Execute ``cfg.runs`` seeded runs; with ``out_dir`` write per-run files and a summary."""
    out = Path(out_dir) if out_dir is not None else None
    reports = []
    for run in range(cfg.runs):
        res = run_once(cfg, run, cache)
        reports.append(res.report)
        if out is not None and write_runs and res.pgo is not None:
            write_run_outputs(res, out / f"run_{run:03d}")
    if out is not None:
        write_manifest(cfg, out)
        write_reports(reports, out / "reports.csv")
        write_sweep([("all", aggregate(reports))], "scenario", out / "summary.csv")
    return reports


def sweep(cfg: ScenarioConfig, parameter: str, values, out_dir=None, write_runs: bool = False) -> list:
    """Paired sweep: run index ``i`` uses the same seed for every value.

    Returns ``[(value, [RunReport])]``; with ``out_dir`` writes ``sweep.csv``
    (mean and std per value) and ``runs.csv``.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise UnknownParameter(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_PARAMETERS)}")
    out = Path(out_dir) if out_dir is not None else None
    cache = FrontendCache()
    rows = []
    for value in values:
        sub = cfg.with_parameter(parameter, value)
        sub_dir = out / f"{parameter}={value}" if (out is not None and write_runs) else None
        rows.append((value, run_scenario(sub, sub_dir, cache=cache) if sub_dir else
                     [run_once(sub, i, cache).report for i in range(sub.runs)]))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, out, {"sweep": {"parameter": parameter, "values": list(values)}})
        write_sweep([(v, aggregate(r)) for v, r in rows], parameter, out / "sweep.csv")
        with open(out / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([parameter] + REPORT_COLUMNS)
            for v, reps in rows:
                for r in reps:
                    w.writerow([v] + report_row(r))
    return rows


@dataclass
class SolveResult:
    graphs: dict
    outcomes: dict
    inliers: list
    pgo: PgoResult


def load_graphs(paths) -> dict:
    """Merge g2o files into per-robot graphs; inter-robot edges become candidates."""
    merged = PoseGraph(owner=0)
    for p in paths:
        g = read_g2o(p)
        for k, pose in g.poses.items():
            if k in merged.poses:
                raise ValueError(f"vertex {k} appears in more than one input file")
            merged.poses[k] = pose
        for e in g.odometry:
            merged.add_odometry(e)
        for e in g.loop_closures:
            merged.add_loop_closure(e)
    if not merged.poses:
        raise ValueError("no vertices in the input files")
    merged.owner = min(k.robot_id for k in merged.poses)
    return split_by_robot(merged)


def solve(paths, pcm_threshold: float = 0.01, pgo_cfg: PgoConfig | None = None,
          pcm_enabled: bool = True) -> SolveResult:
    graphs = load_graphs(paths)
    seen, candidates = set(), []
    for g in graphs.values():
        for e in g.loop_closures:
            tag = (e.source, e.target, tuple(e.relative_pose.translation), tuple(e.relative_pose.rotation.ravel()))
            if tag not in seen:
                seen.add(tag)
                candidates.append(e)
    outcomes = select_inliers_all(candidates, graphs, PcmConfig(likelihood_threshold=pcm_threshold,
                                                                enabled=pcm_enabled))
    inliers = [e for o in outcomes.values() for e in o.inliers]
    cfg = pgo_cfg or PgoConfig()
    net = rally_network(sorted(graphs), NetworkConfig())
    result = run_distributed_pgo(graphs, inliers, cfg, net)
    return SolveResult(graphs, outcomes, inliers, result)


def read_reports(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_dir(path) -> list[dict]:
    """Mean/std rows for ``reports.csv`` or ``runs.csv`` found in a run directory."""
    path = Path(path)
    if (path / "sweep.csv").exists():
        return read_reports(path / "sweep.csv")
    if not (path / "reports.csv").exists():
        raise FileNotFoundError(f"{path} contains neither reports.csv nor sweep.csv")
    rows = read_reports(path / "reports.csv")
    out = []
    for col in ("ate_m", "odometry_ate_m", "pct_outliers_rejected", "pct_inliers_rejected", "bytes_frontend",
                "bytes_backend", "bytes_centralized_baseline"):
        vals = [float(r[col]) for r in rows if r["status"] == "ok" and r[col] not in ("NA", "nan")]
        mean = sum(vals) / len(vals) if vals else math.nan
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append({"metric": col, "runs": len(vals), "mean": mean, "std": std})
    return out
