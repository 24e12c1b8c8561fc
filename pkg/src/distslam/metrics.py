"""Trajectory error, rejection statistics, and report/sweep CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import KeyMismatch


def _positions(poses: dict, keys) -> np.ndarray:
    out = []
    for k in keys:
        p = poses[k]
        out.append(p.translation if hasattr(p, "translation") else np.asarray(p, dtype=float))
    return np.array(out, dtype=float).reshape(len(out), 3)


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Rotation ``R`` and translation ``t`` minimizing ``sum |R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return rot, mu_d - rot @ mu_s


def ate(estimate: dict, ground_truth: dict) -> float:
    """RMS position error after one joint rigid alignment (no scale)."""
    if set(estimate) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(estimate))[:3]
        extra = sorted(set(estimate) - set(ground_truth))[:3]
        raise KeyMismatch(f"key sets differ; missing {missing}, unexpected {extra}")
    if not estimate:
        raise KeyMismatch("empty trajectories")
    keys = sorted(estimate)
    est, gt = _positions(estimate, keys), _positions(ground_truth, keys)
    rot, t = rigid_align(est, gt)
    err = est @ rot.T + t - gt
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass(frozen=True)
class RejectionStats:
    inliers_accepted: int
    inliers_rejected: int
    outliers_accepted: int
    outliers_rejected: int

    @property
    def pct_outliers_rejected(self) -> float | None:
        n = self.outliers_accepted + self.outliers_rejected
        return 100.0 * self.outliers_rejected / n if n else None

    @property
    def pct_inliers_rejected(self) -> float | None:
        n = self.inliers_accepted + self.inliers_rejected
        return 100.0 * self.inliers_rejected / n if n else None


def rejection_stats(labels, accepted) -> RejectionStats:
    """Counts by generator label; ``labels`` and ``accepted`` are parallel booleans."""
    labels = [bool(v) for v in labels]
    accepted = [bool(v) for v in accepted]
    if len(labels) != len(accepted):
        raise ValueError("labels and acceptance flags differ in length")
    ia = sum(1 for l, a in zip(labels, accepted) if l and a)
    ir = sum(1 for l, a in zip(labels, accepted) if l and not a)
    oa = sum(1 for l, a in zip(labels, accepted) if not l and a)
    orj = sum(1 for l, a in zip(labels, accepted) if not l and not a)
    return RejectionStats(ia, ir, oa, orj)


@dataclass(frozen=True)
class RunReport:
    run: int
    seed: int
    ate_m: float
    odometry_ate_m: float
    pct_outliers_rejected: float | None
    pct_inliers_rejected: float | None
    inliers_accepted: int
    inliers_rejected: int
    outliers_accepted: int
    outliers_rejected: int
    candidates: int
    bytes_total: int
    bytes_frontend: int
    bytes_backend: int
    bytes_centralized_baseline: int
    rotation_iterations: int
    pose_iterations: int
    converged: bool
    status: str = "ok"

    def __post_init__(self):
        for p in (self.pct_outliers_rejected, self.pct_inliers_rejected):
            if p is not None and not 0.0 <= p <= 100.0:
                raise ValueError("percentages must lie in [0, 100]")
        total = self.inliers_accepted + self.inliers_rejected + self.outliers_accepted + self.outliers_rejected
        if total != self.candidates:
            raise ValueError("label counts do not add up to the candidate total")


REPORT_COLUMNS = [f.name for f in fields(RunReport)]


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def report_row(report: RunReport) -> list:
    return [_fmt(v) for v in asdict(report).values()]


def write_reports(reports, path, extra: dict | None = None):
    """One row per run; ``extra`` columns (e.g. a sweep value) are prepended."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in extra.values()] + report_row(r))


AGGREGATE_METRICS = ["ate_m", "pct_outliers_rejected", "pct_inliers_rejected", "bytes_total", "bytes_backend"]


def aggregate(reports, metrics=AGGREGATE_METRICS) -> dict:
    """Mean and sample std per metric over successful runs; missing values skipped."""
    out = {}
    ok = [r for r in reports if r.status == "ok"]
    for m in metrics:
        vals = np.array([getattr(r, m) for r in ok if getattr(r, m) is not None], dtype=float)
        out[m] = (float(vals.mean()) if vals.size else None,
                  float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None))
    out["runs"] = len(ok)
    return out


def write_sweep(rows, parameter: str, path, metrics=AGGREGATE_METRICS):
    """``rows`` is a list of ``(value, aggregate dict)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [parameter, "runs"]
        for m in metrics:
            header += [f"{m}_mean", f"{m}_std"]
        w.writerow(header)
        for value, agg in rows:
            line = [_fmt(value), agg["runs"]]
            for m in metrics:
                line += [_fmt(agg[m][0]), _fmt(agg[m][1])]
            w.writerow(line)
