"""Pairwise consistent measurement set maximization over inter-robot loop closures.

Two loop closures between robots ``a`` and ``b`` are consistent when the
cycle they close with the odometry of both robots composes to (nearly) the
identity, measured as a squared Mahalanobis distance and gated against a
chi-squared quantile with 6 degrees of freedom.  The accepted set for a robot
pair is the maximum clique of the resulting consistency graph.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import _kernels_py, kernels, se3
from .errors import DomainError, MissingChainSegment
from .posegraph import EdgeKind, MeasurementEdge, OdometryIndex, PoseGraph, odometric_relative

log = logging.getLogger(__name__)

DEFAULT_EXACT_CAP = 60


@dataclass(frozen=True)
class PcmConfig:
    likelihood_threshold: float = 0.01
    dof: int = 6
    exact_cap: int = DEFAULT_EXACT_CAP
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.likelihood_threshold < 1.0:
            raise DomainError(f"likelihood_threshold must lie in (0, 1), got {self.likelihood_threshold}")
        if self.dof < 1:
            raise DomainError("dof must be >= 1")
        if self.exact_cap < 1:
            raise DomainError("exact_cap must be >= 1")

    @property
    def gate(self) -> float:
        return chi2_quantile(self.likelihood_threshold, self.dof)


def chi2_quantile(p: float, dof: int) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if dof < 1:
        raise DomainError(f"dof must be >= 1, got {dof}")
    return float(chi2.ppf(p, dof))


def orient(edge: MeasurementEdge, robot_id: int) -> MeasurementEdge:
    """Return ``edge`` expressed with its source on ``robot_id``."""
    if edge.source.robot_id == robot_id:
        return edge
    if edge.target.robot_id != robot_id:
        raise ValueError(f"edge {edge.source}->{edge.target} does not touch robot {robot_id}")
    z = edge.relative_pose
    ad_inv = se3.adjoint(se3.inverse(z))
    info = ad_inv.T @ edge.information @ ad_inv
    return MeasurementEdge(edge.target, edge.source, se3.inverse(z), 0.5 * (info + info.T), edge.kind)


def _signed_relative(graph, i, j):
    if i.keyframe_index <= j.keyframe_index:
        return odometric_relative(graph, i, j)
    back, cov = odometric_relative(graph, j, i)
    return se3.inverse(back), se3.propagate_covariance(back, cov)


def pairwise_consistent(lc1, lc2, graph_a: PoseGraph, graph_b: PoseGraph, cfg: PcmConfig):
    """Evaluate the cycle ``odo(a_i->a_j) * lc1 * odo(b_k->b_l) * lc2^-1``.

    ``lc1`` joins ``a_j -> b_k`` and ``lc2`` joins ``a_i -> b_l``.  Returns
    ``(consistent, squared_distance)``.
    """
    a = lc1.source.robot_id
    lc1, lc2 = orient(lc1, a), orient(lc2, a)
    odo_a, cov_a = _signed_relative(graph_a, lc2.source, lc1.source)
    odo_b, cov_b = _signed_relative(graph_b, lc1.target, lc2.target)
    d2 = _kernels_py.cycle_sq_distance(
        odo_a, cov_a, lc1.relative_pose, lc1.covariance, odo_b, cov_b, lc2.relative_pose, lc2.covariance
    )
    return bool(d2 <= cfg.gate), float(d2)


@dataclass
class ConsistencyGraph:
    nodes: list
    adjacency: np.ndarray
    sq_distances: np.ndarray = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        n = len(self.nodes)
        if self.adjacency.shape != (n, n):
            raise ValueError("adjacency shape does not match node count")
        if not np.array_equal(self.adjacency, self.adjacency.T) or np.any(np.diag(self.adjacency)):
            raise ValueError("adjacency must be symmetric with an empty diagonal")

    @classmethod
    def from_adjacency(cls, adj) -> ConsistencyGraph:
        adj = np.asarray(adj, dtype=bool)
        return cls(list(range(adj.shape[0])), adj)

    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


def _index_for(graphs, robot_id) -> OdometryIndex:
    g = graphs[robot_id]
    return g if isinstance(g, OdometryIndex) else OdometryIndex(g, robot_id)


def consistency_distances(candidates, graphs, backend=None) -> np.ndarray:
    """Canonical-order squared distances between every pair of candidates."""
    n = len(candidates)
    if n < 2:
        return np.zeros((n, n))
    a = candidates[0].source.robot_id
    oriented = [orient(e, a) for e in candidates]
    b = oriented[0].target.robot_id
    if any(e.target.robot_id != b for e in oriented):
        raise ValueError("candidates must all connect the same robot pair")
    idx_a, idx_b = _index_for(graphs, a), _index_for(graphs, b)
    ia = np.array([idx_a._offset(e.source) for e in oriented], dtype=np.int64)
    kb = np.array([idx_b._offset(e.target) for e in oriented], dtype=np.int64)
    lc_poses = np.array([e.relative_pose.matrix() for e in oriented])
    lc_covs = np.array([e.covariance for e in oriented])
    d2 = kernels.cycle_sq_distances(
        ia, kb, lc_poses, lc_covs,
        idx_a.poses, idx_a.prefix, idx_a.segment_start,
        idx_b.poses, idx_b.prefix, idx_b.segment_start,
        backend=backend,
    )
    if np.any(np.isnan(d2)):
        raise MissingChainSegment(f"odometry gap inside a consistency cycle for robots {a}/{b}")
    return d2


def build_consistency_graph(candidates, graphs, cfg: PcmConfig, backend=None) -> ConsistencyGraph:
    d2 = consistency_distances(candidates, graphs, backend=backend)
    adj = d2 <= cfg.gate
    np.fill_diagonal(adj, False)
    return ConsistencyGraph(list(range(len(candidates))), adj, d2)


@dataclass(frozen=True)
class CliqueResult:
    members: tuple
    certified: bool

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def _greedy_clique(adj: np.ndarray) -> list[int]:
    """Degeneracy-ordered greedy clique; larger then lexicographically smaller wins."""
    n = adj.shape[0]
    deg = adj.sum(axis=1).astype(int)
    alive = np.ones(n, dtype=bool)
    core = np.zeros(n, dtype=int)
    k = 0
    for _ in range(n):
        cand = np.flatnonzero(alive)
        v = cand[np.argmin(deg[cand])]
        k = max(k, deg[v])
        core[v] = k
        alive[v] = False
        deg[adj[v] & alive] -= 1
    best: list[int] = []
    for v in sorted(range(n), key=lambda u: (-core[u], u)):
        if core[v] + 1 < len(best):
            break
        clique = [v]
        pool = adj[v].copy()
        while pool.any():
            cand = np.flatnonzero(pool)
            inner = adj[np.ix_(cand, cand)].sum(axis=1)
            u = cand[np.lexsort((cand, -core[cand], -inner))[0]]
            clique.append(int(u))
            pool &= adj[u]
        clique.sort()
        if (len(clique), [-x for x in clique]) > (len(best), [-x for x in best]):
            best = clique
    return best


def max_clique(g: ConsistencyGraph, exact_cap: int = DEFAULT_EXACT_CAP, backend=None) -> CliqueResult:
    n = len(g.nodes)
    if n == 0:
        return CliqueResult((), True)
    if n <= exact_cap:
        return CliqueResult(tuple(kernels.max_clique_exact(g.adjacency, backend=backend)), True)
    log.warning("consistency graph with %d nodes exceeds exact cap %d; using greedy clique", n, exact_cap)
    return CliqueResult(tuple(_greedy_clique(g.adjacency)), False)


@dataclass
class PcmOutcome:
    candidates: list
    graph: ConsistencyGraph
    clique: CliqueResult
    accepted: np.ndarray = field(default=None)

    @property
    def inliers(self) -> list:
        return [self.candidates[i] for i in self.clique.members]

    @property
    def rejected(self) -> list:
        keep = set(self.clique.members)
        return [c for i, c in enumerate(self.candidates) if i not in keep]


def evaluate_pair(candidates, graphs, cfg: PcmConfig, backend=None) -> PcmOutcome:
    candidates = list(candidates)
    for e in candidates:
        if e.kind is not EdgeKind.INTER_ROBOT:
            raise ValueError("PCM only handles inter-robot loop closures")
    n = len(candidates)
    if not cfg.enabled:
        graph = ConsistencyGraph(list(range(n)), np.zeros((n, n), dtype=bool), np.zeros((n, n)))
        clique = CliqueResult(tuple(range(n)), True)
    else:
        graph = build_consistency_graph(candidates, graphs, cfg, backend=backend)
        clique = max_clique(graph, cfg.exact_cap, backend=backend)
    accepted = np.zeros(n, dtype=bool)
    accepted[list(clique.members)] = True
    return PcmOutcome(candidates, graph, clique, accepted)


def select_inliers(candidates, graphs, cfg: PcmConfig, backend=None):
    """Split candidates of one robot pair into ``(inliers, rejected)``."""
    out = evaluate_pair(candidates, graphs, cfg, backend=backend)
    return out.inliers, out.rejected


def group_by_pair(edges) -> dict:
    groups = defaultdict(list)
    for e in edges:
        pair = tuple(sorted((e.source.robot_id, e.target.robot_id)))
        groups[pair].append(e)
    return dict(sorted(groups.items()))


def select_inliers_all(candidates, graphs, cfg: PcmConfig, backend=None) -> dict:
    """Independent clique per robot pair; returns ``{pair: PcmOutcome}``."""
    return {pair: evaluate_pair(group, graphs, cfg, backend=backend)
            for pair, group in group_by_pair(candidates).items()}
