import csv
import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest
from conftest import chain_graph, inter_edge, random_trajectory

from distslam import config, runner, se3
from distslam.cli import main
from distslam.errors import DistSlamError, UnknownParameter
from distslam.metrics import REPORT_COLUMNS
from distslam.network import ENVELOPE_COLUMNS, EXCHANGE_COLUMNS
from distslam.posegraph import GlobalKey, PoseGraph, read_g2o, write_g2o

K = GlobalKey


def small_config(**top):
    cfg = config.builtin("standard")
    cfg = replace(cfg, runs=2, name="small", world=replace(cfg.world, n_robots=3, keyframes_per_robot=15))
    return replace(cfg, **top)


@pytest.fixture
def small_yaml(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(config.dump(small_config()))
    return path


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_derive_seed_stable():
    assert runner.derive_seed(0, 3) == runner.derive_seed(0, 3)
    assert len({runner.derive_seed(0, r) for r in range(50)}) == 50
    assert runner.derive_seed(0, 1) != runner.derive_seed(1, 1)


def test_simulate_writes_documented_files(tmp_path, small_yaml, capsys):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(small_yaml), "--out", str(out)]) == 0
    assert "runs=2" in capsys.readouterr().out
    assert header(out / "reports.csv") == REPORT_COLUMNS
    assert header(out / "summary.csv")[:4] == ["scenario", "runs", "ate_m_mean", "ate_m_std"]
    run = out / "run_000"
    assert header(run / "candidates.csv") == runner.CANDIDATE_COLUMNS
    assert header(run / "frontend_envelopes.csv") == ENVELOPE_COLUMNS
    assert header(run / "frontend_exchange.csv") == EXCHANGE_COLUMNS
    assert header(run / "backend_exchange.csv") == EXCHANGE_COLUMNS
    est, gt = read_g2o(run / "estimate.g2o"), read_g2o(run / "ground_truth.g2o")
    assert set(est.poses) == set(gt.poses) and len(gt.poses) == 45
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["config"] == small_config().to_dict()
    assert config.load(out / "config.yaml") == small_config()


def test_identical_runs_are_byte_identical(tmp_path, small_yaml):
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(small_yaml), "--seed", "99", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


def test_different_seed_changes_results(tmp_path):
    r1 = runner.run_scenario(small_config(runs=1, seed=1))
    r2 = runner.run_scenario(small_config(runs=1, seed=2))
    assert r1[0].seed != r2[0].seed and r1[0].ate_m != r2[0].ate_m


def test_no_outliers_accepts_everything():
    # with a likelihood threshold near 1 the gate admits every consistent
    # pair, so a clean candidate set must come through whole
    cfg = small_config(runs=1)
    cfg = replace(cfg, frontend=replace(cfg.frontend, outlier_fraction=0.0),
                  pcm=replace(cfg.pcm, likelihood_threshold=0.999999))
    rep = runner.run_scenario(cfg)[0]
    assert rep.status == "ok" and rep.candidates > 0
    assert rep.inliers_accepted == rep.candidates
    assert rep.pct_outliers_rejected is None and rep.pct_inliers_rejected == 0.0
    assert rep.ate_m < rep.odometry_ate_m


def test_failed_run_is_recorded_and_others_continue(monkeypatch):
    real = runner.evaluate

    def flaky(cfg, world, mission, run, seed):
        if run == 0:
            raise DistSlamError("injected")
        return real(cfg, world, mission, run, seed)

    monkeypatch.setattr(runner, "evaluate", flaky)
    reps = runner.run_scenario(small_config())
    assert reps[0].status.startswith("failed: DistSlamError: injected")
    assert reps[1].status == "ok"


def test_sweep_is_paired(tmp_path):
    rows = runner.sweep(small_config(), "pcm_threshold", ["0.01", "0.5"], tmp_path / "sw")
    (v1, a), (v2, b) = rows
    assert (v1, v2) == ("0.01", "0.5")
    for x, y in zip(a, b):
        assert x.seed == y.seed
        assert x.odometry_ate_m == y.odometry_ate_m
        assert x.candidates == y.candidates and x.bytes_frontend == y.bytes_frontend
    assert sum(r.inliers_rejected for r in a) >= sum(r.inliers_rejected for r in b)
    rows_csv = list(csv.reader(open(tmp_path / "sw" / "sweep.csv")))
    assert rows_csv[0][:2] == ["pcm_threshold", "runs"] and [r[0] for r in rows_csv[1:]] == ["0.01", "0.5"]
    assert header(tmp_path / "sw" / "runs.csv") == ["pcm_threshold"] + REPORT_COLUMNS
    with pytest.raises(UnknownParameter):
        runner.sweep(small_config(), "alpha", [1])


def test_sweep_cli_and_report(tmp_path, small_yaml, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(small_yaml), "--param", "min_correspondences", "--values", "5,20",
                 "--runs", "1", "--out", str(out), "--write-runs"])
    assert code == 0
    assert (out / "min_correspondences=5" / "run_000" / "candidates.csv").exists()
    capsys.readouterr()
    assert main(["report", "--dir", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("min_correspondences,runs") and len(lines) == 3


def test_report_on_simulate_dir(tmp_path, small_yaml, capsys):
    out = tmp_path / "sim"
    main(["simulate", "--config", str(small_yaml), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("metric,runs,mean,std") and "bytes_backend" in text


def g2o_problem(tmp_path, rng):
    truth = {r: random_trajectory(rng, 20, origin=se3.Pose3(np.eye(3), [0, 3.0 * r, 0])) for r in (0, 1)}
    graphs = {r: chain_graph(r, truth[r], rng, 0.01, 0.1) for r in (0, 1)}
    allt = {K(r, k): p for r in truth for k, p in enumerate(truth[r])}
    closures = [inter_edge(allt, K(0, i), K(1, i), rng, 0.01, 0.1) for i in range(0, 20, 3)]
    bad = inter_edge(allt, K(0, 10), K(1, 4))
    bad = replace(bad, relative_pose=se3.compose(bad.relative_pose, se3.Pose3(np.eye(3), [10.0, 0, 0])))
    paths = []
    for r in (0, 1):
        g = PoseGraph(owner=r, poses=graphs[r].poses, odometry=graphs[r].odometry)
        g.loop_closures.extend(e for e in closures + [bad] if e.source.robot_id == r)
        paths.append(tmp_path / f"robot{r}.g2o")
        write_g2o(g, paths[-1])
    return paths, bad


def test_solve_rejects_planted_outlier(tmp_path, rng, capsys):
    paths, bad = g2o_problem(tmp_path, rng)
    # 0.01 keeps only the tightest pairs; a permissive gate still drops a 10 m outlier
    res = runner.solve(paths, 0.99)
    assert len(res.inliers) == 7
    assert not any(e.same_as(bad, tol=1e-6) for e in res.inliers)
    out = tmp_path / "sol.g2o"
    assert main(["solve", "--input", *map(str, paths), "--pcm-threshold", "0.99", "--output", str(out)]) == 0
    assert "7 accepted, 1 rejected" in capsys.readouterr().out
    sol = read_g2o(out)
    assert len(sol.poses) == 40 and len(sol.loop_closures) == 7
    assert np.allclose(sol.poses[K(0, 0)].matrix(), np.eye(4), atol=1e-9)


def test_solve_without_pcm_keeps_everything(tmp_path, rng):
    paths, _ = g2o_problem(tmp_path, rng)
    assert len(runner.solve(paths, pcm_enabled=False).inliers) == 8


@pytest.mark.parametrize("argv", [
    ["simulate", "--config", "no-such-file.yaml"],
    ["report", "--dir", "no-such-dir"],
    ["solve", "--input", "no-such.g2o"],
])
def test_errors_exit_with_code_2(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("schema_version: 1\npcm:\n  likelihood: 3\n")
    assert main(["simulate", "--config", str(path)]) == 2
    assert "likelihood" in capsys.readouterr().err


def test_bad_seed_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--config", "standard", "--seed", "-1"])
    assert info.value.code == 2
