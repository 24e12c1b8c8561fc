"""Two-stage distributed pose-graph optimization by block Gauss-Seidel.

Stage one estimates rotations from a chordal relaxation: unknowns are the
unconstrained 3x3 blocks ``Y_i = R_i^T`` and each edge contributes
``w * ||Y_j - Rbar^T Y_i||_F^2``.  Stage two linearizes the full SE(3)
objective at the rotation estimate and solves the normal equations with the
same robot-by-robot sweep.  Robots only ever transmit values of separator
keys, i.e. their own endpoints of inter-robot loop closures.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import se3
from .errors import ConfigError, ConnectivityLost, DisconnectedGraph
from .network import ByteModel, Message, MessageType, Network
from .posegraph import MeasurementEdge
from .se3 import Pose3

log = logging.getLogger(__name__)

# slack allowed when checking that the chordal cost never increases
MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class PgoConfig:
    rotation_stage_max_iters: int = 1000
    pose_stage_max_iters: int = 1000
    rel_change_tol: float = 1e-5
    pose_stage_relinearizations: int = 1
    require_connected: bool = False
    # successive over-relaxation factor for both sweeps; 1.0 is plain Gauss-Seidel
    sor_omega: float = 1.0

    def __post_init__(self):
        if self.rotation_stage_max_iters < 1 or self.pose_stage_max_iters < 1:
            raise ConfigError("iteration caps must be >= 1")
        if not self.rel_change_tol > 0:
            raise ConfigError("rel_change_tol must be positive")
        if self.pose_stage_relinearizations < 1:
            raise ConfigError("pose_stage_relinearizations must be >= 1")
        if not 0.0 < self.sor_omega < 2.0:
            raise ConfigError("sor_omega must lie in (0, 2)")


class SeparatorSet:
    """Keys of each robot pair that appear in inter-robot loop closures."""

    def __init__(self, inliers):
        self._by_pair: dict = defaultdict(set)
        for e in inliers:
            a, b = e.source.robot_id, e.target.robot_id
            pair = (min(a, b), max(a, b))
            self._by_pair[pair].update((e.source, e.target))

    def pairs(self) -> list:
        return sorted(self._by_pair)

    def keys(self, a: int, b: int) -> frozenset:
        return frozenset(self._by_pair.get((min(a, b), max(a, b)), ()))

    def sent_by(self, sender: int, receiver: int) -> list:
        """Separator keys owned by ``sender`` that ``receiver`` needs."""
        return sorted(k for k in self.keys(sender, receiver) if k.robot_id == sender)

    def neighbors(self, robot: int) -> list:
        return sorted({b if a == robot else a for a, b in self._by_pair if robot in (a, b)})

    def all_keys(self) -> frozenset:
        return frozenset().union(*self._by_pair.values()) if self._by_pair else frozenset()


@dataclass
class _Robot:
    rid: int
    keys: list
    index: dict
    odometry: list
    cross: list = field(default_factory=list)  # (edge, local key, remote key)
    anchor: int | None = None

    @property
    def n(self) -> int:
        return len(self.keys)


def _edge_weight(edge: MeasurementEdge) -> float:
    return float(np.trace(edge.information[:3, :3]) / 3.0)


def _build(graphs: dict, inliers) -> dict:
    robots = {}
    for rid in sorted(graphs):
        g = graphs[rid]
        keys = sorted(k for k in g.poses if k.robot_id == rid)
        robots[rid] = _Robot(rid, keys, {k: i for i, k in enumerate(keys)},
                             [e for e in g.odometry if e.source.robot_id == rid])
    for e in inliers:
        for local, remote in ((e.source, e.target), (e.target, e.source)):
            if local.robot_id not in robots or local not in robots[local.robot_id].index:
                raise KeyError(f"loop closure endpoint {local} is not in any graph")
            robots[local.robot_id].cross.append((e, local, remote))
    return robots


def components(robot_ids, inliers) -> list:
    """Connected components of the robot-level graph, each sorted, in order of smallest id."""
    adj = defaultdict(set)
    for e in inliers:
        a, b = e.source.robot_id, e.target.robot_id
        adj[a].add(b)
        adj[b].add(a)
    seen, comps = set(), []
    for r in sorted(robot_ids):
        if r in seen:
            continue
        comp, queue = [], deque([r])
        seen.add(r)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def _assign_anchors(robots: dict, inliers, cfg: PgoConfig) -> list:
    comps = components(robots, inliers)
    if len(comps) > 1 and cfg.require_connected:
        raise DisconnectedGraph(f"robot graph has {len(comps)} components: {comps}")
    for comp in comps:
        robots[comp[0]].anchor = 0
    return comps


class _Exchanger:
    """Separator broadcast: each call sends one robot's values to its neighbours."""

    def __init__(self, network: Network | None, seps: SeparatorSet, caches: dict, start: int):
        self.network = network
        self.seps = seps
        self.caches = caches
        self.start = start
        self._plan = {}

    def _outgoing(self, sender):
        if sender not in self._plan:
            self._plan[sender] = [(nb, self.seps.sent_by(sender, nb)) for nb in self.seps.neighbors(sender)]
        return self._plan[sender]

    def __call__(self, sender: int, payload_of):
        outgoing = [(nb, {k: payload_of(k) for k in keys}) for nb, keys in self._outgoing(sender)]
        if not outgoing:
            return
        if self.network is None:
            for nb, values in outgoing:
                self.caches[nb].update(values)
            return
        for nb, values in outgoing:
            self.network.send(sender, nb, Message(MessageType.POSE_ESTIMATE, len(values), values, len(values)))
        delivered = self.network.deliver_round()
        if len(delivered) < len(outgoing):
            raise ConnectivityLost(f"robot {sender} lost contact with a neighbour during optimization",
                                   self.network.log[self.start:])
        for env in delivered:
            self.caches[env.receiver].update(env.message.payload)


class _SlotCache:
    """Latest received separator values, stored in one array in a fixed key order."""

    def __init__(self, keys, shape):
        self.slot = {k: i for i, k in enumerate(sorted(set(keys)))}
        self.array = np.zeros((len(self.slot), *shape))

    def update(self, values: dict):
        for k, v in values.items():
            self.array[self.slot[k]] = v

    def __getitem__(self, key):
        return self.array[self.slot[key]]


class _Coupling:
    """Cross-robot blocks of one robot: ``rhs[rows[m]] -= blocks[m] @ value(remote[m])``."""

    def __init__(self, rows, remote, blocks, size):
        self.rows = np.asarray(rows, dtype=np.intp)
        self.remote = list(remote)
        self.blocks = np.asarray(blocks, dtype=float).reshape(len(self.remote), size, size)
        self.size = size
        self._index = None

    def cache(self, shape) -> _SlotCache:
        c = _SlotCache(self.remote, shape)
        self._index = np.array([c.slot[k] for k in self.remote], dtype=np.intp)
        return c

    def apply(self, cache: _SlotCache, n: int, cols: int | None = None) -> np.ndarray:
        """Sum of ``blocks @ cached values`` scattered onto ``n`` local blocks."""
        shape = (n, self.size) if cols is None else (n, self.size, cols)
        out = np.zeros(shape)
        if self.remote:
            prod = np.einsum("mij,mj...->mi...", self.blocks, cache.array[self._index])
            np.add.at(out, self.rows, prod)
        return out.reshape(n * self.size, -1) if cols is not None else out.reshape(-1)


# ---------------------------------------------------------------- rotations

def _rotation_system(robot: _Robot):
    n = robot.n
    H = np.zeros((3 * n, 3 * n))
    for e in robot.odometry:
        i, j = robot.index[e.source], robot.index[e.target]
        w = _edge_weight(e)
        rb = e.relative_pose.rotation
        H[3 * i:3 * i + 3, 3 * i:3 * i + 3] += w * np.eye(3)
        H[3 * j:3 * j + 3, 3 * j:3 * j + 3] += w * np.eye(3)
        H[3 * i:3 * i + 3, 3 * j:3 * j + 3] -= w * rb
        H[3 * j:3 * j + 3, 3 * i:3 * i + 3] -= w * rb.T
    for e, local, _ in robot.cross:
        i = robot.index[local]
        H[3 * i:3 * i + 3, 3 * i:3 * i + 3] += _edge_weight(e) * np.eye(3)
    return H


def _rotation_coupling(robot: _Robot) -> _Coupling:
    rows, remote, blocks = [], [], []
    for e, local, other in robot.cross:
        w = _edge_weight(e)
        rb = e.relative_pose.rotation
        rows.append(robot.index[local])
        remote.append(other)
        blocks.append(-w * rb if e.source == local else -w * rb.T)
    return _Coupling(rows, remote, blocks, 3)


def chordal_cost(Y: dict, edges) -> float:
    """Weighted chordal objective for ``Y[key] = R_key^T`` blocks."""
    edges = list(edges)
    if not edges:
        return 0.0
    ys = np.stack([Y[e.source] for e in edges])
    yt = np.stack([Y[e.target] for e in edges])
    rt = np.stack([e.relative_pose.rotation.T for e in edges])
    w = np.array([_edge_weight(e) for e in edges])
    r = yt - np.einsum("mij,mjk->mik", rt, ys)
    return float(np.sum(w * np.sum(r * r, axis=(1, 2))))


class _LocalSolver:
    """Exact solve of one robot's block with its anchor (if any) held fixed."""

    def __init__(self, H: np.ndarray, anchor: int | None, block: int):
        size = H.shape[0]
        self.block = block
        self.free = np.ones(size, dtype=bool)
        if anchor is not None:
            self.free[block * anchor:block * anchor + block] = False
        self.H = H
        self.factor = cho_factor(H[np.ix_(self.free, self.free)]) if self.free.any() else None

    def solve(self, rhs: np.ndarray, fixed: np.ndarray) -> np.ndarray:
        """Minimize ``x^T H x / 2 - rhs^T x`` with ``x[~free] = fixed``."""
        x = np.zeros_like(rhs)
        x[~self.free] = fixed
        if self.factor is not None:
            b = rhs[self.free] - self.H[np.ix_(self.free, ~self.free)] @ fixed
            x[self.free] = cho_solve(self.factor, b)
        return x


@dataclass
class StageReport:
    iterations: int
    converged: bool
    final_change: float
    history: list


def _relative_change(old: dict, new: dict) -> float:
    num = sum(float(np.sum((new[r] - old[r]) ** 2)) for r in new)
    den = sum(float(np.sum(new[r] ** 2)) for r in new)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def chordal_rotation_stage(graphs: dict, inliers, cfg: PgoConfig, network: Network | None = None,
                           seps: SeparatorSet | None = None, init: dict | None = None):
    """Return ``({key: rotation}, StageReport)``.

    ``init`` optionally maps keys to starting rotations; odometry chaining is
    used otherwise.
    """
    inliers = list(inliers)
    robots = _build(graphs, inliers)
    _assign_anchors(robots, inliers, cfg)
    seps = seps or SeparatorSet(inliers)
    start = len(network.log) if network is not None else 0
    all_edges = [e for r in robots.values() for e in r.odometry] + inliers

    solvers, couplings, Y = {}, {}, {}
    for rid, rb in robots.items():
        solvers[rid] = _LocalSolver(_rotation_system(rb), rb.anchor, 3)
        couplings[rid] = _rotation_coupling(rb)
        blocks = np.zeros((3 * rb.n, 3))
        for k, i in rb.index.items():
            rot = init[k] if init is not None else graphs[rid].poses[k].rotation
            blocks[3 * i:3 * i + 3] = rot.T
        if rb.anchor is not None:
            blocks[3 * rb.anchor:3 * rb.anchor + 3] = np.eye(3)
        Y[rid] = blocks

    def block_of(key):
        i = robots[key.robot_id].index[key]
        return Y[key.robot_id][3 * i:3 * i + 3].copy()

    caches = {rid: couplings[rid].cache((3, 3)) for rid in robots}
    exchange = _Exchanger(network, seps, caches, start)
    for rid in robots:
        exchange(rid, block_of)

    def flat():
        return {k: block_of(k) for rb in robots.values() for k in rb.keys}

    history = [chordal_cost(flat(), all_edges)]
    converged, change, it = False, float("inf"), 0
    for it in range(1, cfg.rotation_stage_max_iters + 1):
        before = {r: y.copy() for r, y in Y.items()}
        for rid, rb in robots.items():
            rhs = -couplings[rid].apply(caches[rid], rb.n, 3)
            fixed = np.eye(3) if rb.anchor is not None else np.zeros((0, 3))
            gs = solvers[rid].solve(rhs, fixed)
            Y[rid] = Y[rid] + cfg.sor_omega * (gs - Y[rid])
            exchange(rid, block_of)
        history.append(chordal_cost(flat(), all_edges))
        if history[-1] > history[-2] * (1 + MONOTONE_SLACK) + MONOTONE_SLACK:
            log.warning("chordal cost increased: %.17g -> %.17g", history[-2], history[-1])
        change = _relative_change(before, Y)
        if change < cfg.rel_change_tol:
            converged = True
            break
    if not converged:
        log.warning("rotation stage hit the iteration cap (change %.3g)", change)
    rotations = {k: se3.project_to_so3(block_of(k).T) for rb in robots.values() for k in rb.keys}
    return rotations, StageReport(it, converged, change, history)


# ---------------------------------------------------------------- full poses

def edge_residual(edge: MeasurementEdge, xi: Pose3, xj: Pose3) -> np.ndarray:
    return se3.log_map(se3.compose(se3.inverse(edge.relative_pose), se3.between(xi, xj)))


def edge_jacobians(edge, xi, xj):
    """Residual and Jacobians for right perturbations of both endpoints."""
    e = edge_residual(edge, xi, xj)
    jr_inv = se3.right_jacobian_inv(e)
    jj = jr_inv
    ji = -jr_inv @ se3.adjoint(se3.between(xj, xi))
    return e, ji, jj


def pgo_cost(poses: dict, edges) -> float:
    """Standard objective: sum of squared Mahalanobis residuals."""
    total = 0.0
    for e in edges:
        r = edge_residual(e, poses[e.source], poses[e.target])
        total += float(r @ e.information @ r)
    return total


def _pose_system(robot: _Robot, x: dict, remote: dict):
    n = robot.n
    H = np.zeros((6 * n, 6 * n))
    g = np.zeros(6 * n)
    rows, others, blocks = [], [], []
    for e in robot.odometry:
        i, j = robot.index[e.source], robot.index[e.target]
        r, ji, jj = edge_jacobians(e, x[e.source], x[e.target])
        om = e.information
        si, sj = slice(6 * i, 6 * i + 6), slice(6 * j, 6 * j + 6)
        H[si, si] += ji.T @ om @ ji
        H[sj, sj] += jj.T @ om @ jj
        H[si, sj] += ji.T @ om @ jj
        H[sj, si] += jj.T @ om @ ji
        g[si] += ji.T @ om @ r
        g[sj] += jj.T @ om @ r
    for e, local, other in robot.cross:
        xs = x[e.source] if e.source.robot_id == robot.rid else remote[e.source]
        xt = x[e.target] if e.target.robot_id == robot.rid else remote[e.target]
        r, js, jt = edge_jacobians(e, xs, xt)
        jl, jo = (js, jt) if e.source == local else (jt, js)
        om = e.information
        i = robot.index[local]
        sl = slice(6 * i, 6 * i + 6)
        H[sl, sl] += jl.T @ om @ jl
        g[sl] += jl.T @ om @ r
        rows.append(i)
        others.append(other)
        blocks.append(jl.T @ om @ jo)
    return H, g, _Coupling(rows, others, blocks, 6)


def integrate_translations(robot_keys, odometry, rotations: dict, start: Pose3) -> dict:
    """Chain odometry translations through fixed rotations from ``start``."""
    out = {robot_keys[0]: Pose3(rotations[robot_keys[0]], start.translation)}
    by_source = {e.source: e for e in odometry}
    t = np.asarray(start.translation, dtype=float)
    for k in robot_keys[:-1]:
        e = by_source.get(k)
        if e is None:
            break
        t = t + rotations[k] @ e.relative_pose.translation
        out[e.target] = Pose3(rotations[e.target], t)
    return out


def pose_stage(graphs: dict, inliers, rotations: dict, cfg: PgoConfig, network: Network | None = None,
               seps: SeparatorSet | None = None, starts: dict | None = None):
    """Gauss-Newton on the full objective, linearized at the rotation estimate.

    ``starts`` maps each robot to the pose of its first keyframe used when
    re-integrating translations (identity when omitted).  Returns
    ``({key: Pose3}, [StageReport per relinearization])``.
    """
    inliers = list(inliers)
    robots = _build(graphs, inliers)
    _assign_anchors(robots, inliers, cfg)
    seps = seps or SeparatorSet(inliers)
    start_log = len(network.log) if network is not None else 0

    x = {}
    for rid, rb in robots.items():
        if rb.anchor is not None:
            start = Pose3.identity()
        elif starts is not None and rid in starts:
            start = starts[rid]
        else:
            start = Pose3.identity()
        part = integrate_translations(rb.keys, rb.odometry, rotations, start)
        missing = [k for k in rb.keys if k not in part]
        if missing:
            raise KeyError(f"odometry gap for robot {rid} at {missing[0]}")
        x.update(part)

    reports = []
    for _ in range(cfg.pose_stage_relinearizations):
        # neighbours' linearization points for separator keys
        remote = {rid: {} for rid in robots}
        share = _Exchanger(network, seps, remote, start_log)
        for rid in robots:
            share(rid, lambda k: x[k])
        systems = {}
        for rid, rb in robots.items():
            H, g, coupling = _pose_system(rb, x, remote[rid])
            systems[rid] = (_LocalSolver(H, rb.anchor, 6), g, coupling)
        delta = {rid: np.zeros(6 * rb.n) for rid, rb in robots.items()}

        def delta_of(key):
            i = robots[key.robot_id].index[key]
            return delta[key.robot_id][6 * i:6 * i + 6].copy()

        # increments start at zero on every robot, so no initial exchange is needed
        caches = {rid: systems[rid][2].cache((6,)) for rid in robots}
        exchange = _Exchanger(network, seps, caches, start_log)

        def model_value():
            # quadratic model g.d + d.H.d / 2; caches are current after a full sweep
            total = 0.0
            for rid, (solver, g, coupling) in systems.items():
                d = delta[rid]
                total += g @ d + 0.5 * d @ (solver.H @ d + coupling.apply(caches[rid], robots[rid].n))
            return float(total)

        history, converged, change, it = [model_value()], False, float("inf"), 0
        for it in range(1, cfg.pose_stage_max_iters + 1):
            before = {r: d.copy() for r, d in delta.items()}
            for rid, rb in robots.items():
                solver, g, coupling = systems[rid]
                rhs = -g - coupling.apply(caches[rid], rb.n)
                fixed = np.zeros(6) if rb.anchor is not None else np.zeros(0)
                gs = solver.solve(rhs, fixed)
                delta[rid] = delta[rid] + cfg.sor_omega * (gs - delta[rid])
                exchange(rid, delta_of)
            history.append(model_value())
            change = _relative_change(before, delta)
            if change < cfg.rel_change_tol:
                converged = True
                break
        if not converged:
            log.warning("pose stage hit the iteration cap (change %.3g)", change)
        reports.append(StageReport(it, converged, change, history))
        x = {k: se3.compose(p, se3.exp_map(delta_of(k))) for k, p in x.items()}
    return x, reports


# ---------------------------------------------------------------- orchestration

def align_frames(graphs: dict, inliers, cfg: PgoConfig, network: Network | None = None) -> dict:
    """Express every robot's odometry in its component anchor's frame.

    A spanning tree over robots is grown breadth-first from each anchor; the
    first inlier joining parent and child fixes the child frame, which costs
    one pose-estimate message from parent to child.
    """
    inliers = list(inliers)
    robots = _build(graphs, inliers)
    comps = _assign_anchors(robots, inliers, cfg)
    start_log = len(network.log) if network is not None else 0
    frames = {}
    for comp in comps:
        root = comp[0]
        frames[root] = Pose3.identity()
        queue = deque([root])
        while queue:
            parent = queue.popleft()
            for e in inliers:
                a, b = e.source.robot_id, e.target.robot_id
                if parent not in (a, b):
                    continue
                child = b if a == parent else a
                if child in frames:
                    continue
                if e.source.robot_id == parent:
                    pk, ck, z = e.source, e.target, e.relative_pose
                else:
                    pk, ck, z = e.target, e.source, se3.inverse(e.relative_pose)
                x_parent = se3.compose(frames[parent], graphs[parent].poses[pk])
                frames[child] = se3.compose(se3.compose(x_parent, z), se3.inverse(graphs[child].poses[ck]))
                if network is not None:
                    network.send(parent, child, Message(MessageType.POSE_ESTIMATE, 1, {pk: x_parent}, 1))
                    if not network.deliver_round():
                        raise ConnectivityLost(f"robots {parent} and {child} lost contact during initialisation",
                                               network.log[start_log:])
                queue.append(child)
    # move each component so its anchor keyframe sits at the identity
    out = {}
    for comp in comps:
        root = comp[0]
        fix = se3.inverse(se3.compose(frames[root], graphs[root].poses[robots[root].keys[0]]))
        for rid in comp:
            frame = se3.compose(fix, frames[rid])
            out[rid] = {k: se3.compose(frame, graphs[rid].poses[k]) for k in robots[rid].keys}
    return out


@dataclass
class PgoResult:
    poses: dict
    rotation_report: StageReport
    pose_reports: list
    log: list
    components: list

    @property
    def bytes(self) -> int:
        return sum(r.bytes for r in self.log if r.delivered)


def run_distributed_pgo(graphs: dict, inliers, cfg: PgoConfig | None = None,
                        network: Network | None = None) -> PgoResult:
    """Initialise, run both stages over ``network``, and return the estimate."""
    cfg = cfg or PgoConfig()
    inliers = list(inliers)
    start_log = len(network.log) if network is not None else 0
    seps = SeparatorSet(inliers)
    comps = components(graphs, inliers)
    if len(comps) > 1 and cfg.require_connected:
        raise DisconnectedGraph(f"robot graph has {len(comps)} components: {comps}")
    aligned = align_frames(graphs, inliers, cfg, network)
    init_rot = {k: p.rotation for poses in aligned.values() for k, p in poses.items()}
    rotations, rot_report = chordal_rotation_stage(graphs, inliers, cfg, network, seps, init_rot)
    starts = {rid: poses[min(poses)] for rid, poses in aligned.items()}
    poses, pose_reports = pose_stage(graphs, inliers, rotations, cfg, network, seps, starts)
    records = network.log[start_log:] if network is not None else []
    return PgoResult(poses, rot_report, pose_reports, records, comps)


def centralized_transfer_bytes(graphs: dict, inliers, byte_model: ByteModel | None = None,
                               collector: int | None = None) -> int:
    """Bytes to ship every robot's graph to one collector and return the estimates.

    Each non-collector robot uploads its poses and odometry edges; loop
    closures the collector does not already hold are uploaded once; the
    solution for each uploaded pose is sent back.
    """
    bm = byte_model or ByteModel()
    collector = min(graphs) if collector is None else collector
    total = 0
    for rid, g in graphs.items():
        if rid == collector:
            continue
        n_poses = sum(1 for k in g.poses if k.robot_id == rid)
        n_odom = sum(1 for e in g.odometry if e.source.robot_id == rid)
        total += 2 * n_poses * bm.pose_estimate + n_odom * bm.loop_closure
    shipped = [e for e in inliers if collector not in (e.source.robot_id, e.target.robot_id)]
    total += len(shipped) * bm.loop_closure
    return total
