"""Multi-robot pose-graph model, odometric queries and g2o text I/O."""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import se3
from .errors import MissingChainSegment, ParseError
from .se3 import Pose3

ROBOT_BITS = 8
INDEX_BITS = 56
_INDEX_MASK = (1 << INDEX_BITS) - 1


class GlobalKey(NamedTuple):
    robot_id: int
    keyframe_index: int

    def encode(self) -> int:
        if not 0 <= self.robot_id < (1 << ROBOT_BITS):
            raise ValueError(f"robot id {self.robot_id} outside 0..255")
        if not 0 <= self.keyframe_index <= _INDEX_MASK:
            raise ValueError(f"keyframe index {self.keyframe_index} outside 56-bit range")
        return (self.robot_id << INDEX_BITS) | self.keyframe_index

    @classmethod
    def decode(cls, value: int) -> GlobalKey:
        value = int(value)
        if not 0 <= value < (1 << 64):
            raise ValueError(f"{value} is not an unsigned 64-bit key")
        return cls(value >> INDEX_BITS, value & _INDEX_MASK)

    def __str__(self):
        return f"{self.robot_id}:{self.keyframe_index}"


class EdgeKind(enum.Enum):
    ODOMETRY = "odometry"
    INTER_ROBOT = "inter_robot"


@dataclass(frozen=True, eq=False)
class MeasurementEdge:
    source: GlobalKey
    target: GlobalKey
    relative_pose: Pose3
    information: np.ndarray
    kind: EdgeKind

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float).reshape(6, 6)
        object.__setattr__(self, "information", info)
        s, t = self.source, self.target
        if self.kind is EdgeKind.ODOMETRY:
            if s.robot_id != t.robot_id or t.keyframe_index != s.keyframe_index + 1:
                raise ValueError(f"odometry edge {s}->{t} must join consecutive keyframes")
        elif s.robot_id == t.robot_id:
            raise ValueError(f"inter-robot edge {s}->{t} joins a robot to itself")

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.information)

    def same_as(self, other: MeasurementEdge, tol: float = 0.0) -> bool:
        return (
            self.source == other.source
            and self.target == other.target
            and self.kind is other.kind
            and np.allclose(self.relative_pose.matrix(), other.relative_pose.matrix(), atol=tol, rtol=0)
            and np.allclose(self.information, other.information, atol=tol, rtol=0)
        )


def make_edge(source: GlobalKey, target: GlobalKey, pose: Pose3, information) -> MeasurementEdge:
    kind = EdgeKind.INTER_ROBOT if source.robot_id != target.robot_id else EdgeKind.ODOMETRY
    return MeasurementEdge(source, target, pose, information, kind)


@dataclass
class PoseGraph:
    owner: int
    poses: dict = field(default_factory=dict)
    odometry: list = field(default_factory=list)
    loop_closures: list = field(default_factory=list)

    def robots(self) -> list[int]:
        return sorted({k.robot_id for k in self.poses})

    def keys_of(self, robot_id: int) -> list[GlobalKey]:
        return sorted(k for k in self.poses if k.robot_id == robot_id)

    def odometry_edge(self, key: GlobalKey) -> MeasurementEdge | None:
        """Edge ending at ``key``, if any."""
        return self._odom_by_target().get(key)

    def _odom_by_target(self):
        cache = getattr(self, "_odom_cache", None)
        if cache is None or cache[0] != len(self.odometry):
            cache = (len(self.odometry), {e.target: e for e in self.odometry})
            self._odom_cache = cache
        return cache[1]

    def add_odometry(self, edge: MeasurementEdge):
        if edge.kind is not EdgeKind.ODOMETRY:
            raise ValueError("not an odometry edge")
        self.odometry.append(edge)

    def add_loop_closure(self, edge: MeasurementEdge):
        if edge.kind is not EdgeKind.INTER_ROBOT:
            raise ValueError("not an inter-robot edge")
        self.loop_closures.append(edge)

    def validate(self):
        for e in self.odometry + self.loop_closures:
            for k in (e.source, e.target):
                if k.robot_id == self.owner and k not in self.poses:
                    raise ValueError(f"edge endpoint {k} has no pose")
        for r in self.robots():
            keys = self.keys_of(r)
            by_target = self._odom_by_target()
            for k in keys[1:]:
                if k not in by_target:
                    raise MissingChainSegment(f"odometry chain of robot {r} has a gap before {k}")


def odometric_relative(graph: PoseGraph, i: GlobalKey, j: GlobalKey):
    """Compose the odometry chain ``i -> j``; returns ``(pose, covariance)``.

    Covariance is the first-order accumulation of each edge's covariance in the
    right tangent space at ``j``.
    """
    if i.robot_id != j.robot_id:
        raise ValueError(f"{i} and {j} belong to different robots")
    if i.keyframe_index > j.keyframe_index:
        raise ValueError(f"chain must run forward, got {i} -> {j}")
    pose = Pose3.identity()
    cov = np.zeros((6, 6))
    for idx in range(i.keyframe_index + 1, j.keyframe_index + 1):
        key = GlobalKey(i.robot_id, idx)
        edge = graph.odometry_edge(key)
        if edge is None:
            raise MissingChainSegment(f"no odometry edge into {key}")
        step = edge.relative_pose
        cov = se3.propagate_covariance(se3.inverse(step), cov) + edge.covariance
        pose = se3.compose(pose, step)
    return pose, cov


class OdometryIndex:
    """Prefix products and prefix covariance sums along one robot's chain.

    ``relative(i, j)`` answers the same query as :func:`odometric_relative` in
    constant time: with ``P_k`` the odometric pose of keyframe ``k`` and
    ``S_k = sum_{e<=k} Ad(P_e) C_e Ad(P_e)^T`` the chain covariance between
    ``i <= j`` is ``Ad(P_j^-1) (S_j - S_i) Ad(P_j^-1)^T``.
    """

    def __init__(self, graph: PoseGraph, robot_id: int):
        keys = [k for k in graph.poses if k.robot_id == robot_id]
        targets = [e.target.keyframe_index for e in graph.odometry if e.target.robot_id == robot_id]
        first = min([k.keyframe_index for k in keys] + [t - 1 for t in targets] or [0])
        last = max([k.keyframe_index for k in keys] + targets or [0])
        self.robot_id = robot_id
        self.first = first
        n = last - first + 1
        self.poses = np.zeros((n, 4, 4))
        self.prefix = np.zeros((n, 6, 6))
        # first offset of the gap-free run containing each keyframe
        self.segment_start = np.zeros(n, dtype=np.int64)
        self.poses[0] = np.eye(4)
        by_target = graph._odom_by_target()
        segment_start = 0
        for off in range(1, n):
            edge = by_target.get(GlobalKey(robot_id, first + off))
            if edge is None:
                segment_start = off
                self.poses[off] = np.eye(4)
                self.segment_start[off] = off
                continue
            prev = Pose3.from_matrix(self.poses[off - 1])
            cur = se3.compose(prev, edge.relative_pose)
            self.poses[off] = cur.matrix()
            self.prefix[off] = self.prefix[off - 1] + se3.propagate_covariance(cur, edge.covariance)
            self.segment_start[off] = segment_start

    def _offset(self, key: GlobalKey) -> int:
        off = key.keyframe_index - self.first
        if key.robot_id != self.robot_id or not 0 <= off < len(self.poses):
            raise MissingChainSegment(f"{key} outside odometry chain of robot {self.robot_id}")
        return off

    def relative(self, i: GlobalKey, j: GlobalKey):
        a, b = self._offset(i), self._offset(j)
        if a > b:
            raise ValueError(f"chain must run forward, got {i} -> {j}")
        if self.segment_start[b] > a:
            raise MissingChainSegment(f"odometry gap between {i} and {j}")
        pa = Pose3.from_matrix(self.poses[a])
        pb = Pose3.from_matrix(self.poses[b])
        pose = se3.between(pa, pb)
        cov = se3.propagate_covariance(se3.inverse(pb), self.prefix[b] - self.prefix[a])
        return pose, cov


# -- g2o dialect --------------------------------------------------------------

VERTEX_TAG = "VERTEX_SE3:QUAT"
EDGE_TAG = "EDGE_SE3:QUAT"
# internal tangent order is [rot, trans]; g2o stores [trans, rot]
_G2O_PERM = np.array([3, 4, 5, 0, 1, 2])
_IU = np.triu_indices(6)


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _pose_fields(p: Pose3) -> list[str]:
    q = Rotation.from_matrix(p.rotation).as_quat()
    if q[3] < 0:
        q = -q
    return [_fmt(v) for v in (*p.translation, *q)]


def format_vertex(key: GlobalKey, pose: Pose3) -> str:
    return " ".join([VERTEX_TAG, str(key.encode()), *_pose_fields(pose)])


def format_edge(edge: MeasurementEdge) -> str:
    info = edge.information[np.ix_(_G2O_PERM, _G2O_PERM)]
    return " ".join(
        [EDGE_TAG, str(edge.source.encode()), str(edge.target.encode()),
         *_pose_fields(edge.relative_pose), *(_fmt(v) for v in info[_IU])]
    )


def write_g2o(graph: PoseGraph, destination, vertices_only: bool = False):
    lines = [format_vertex(k, graph.poses[k]) for k in sorted(graph.poses)]
    if not vertices_only:
        edges = sorted(graph.odometry, key=lambda e: (e.source, e.target))
        lines += [format_edge(e) for e in edges]
        lines += [format_edge(e) for e in graph.loop_closures]
    text = "".join(line + "\n" for line in lines)
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    else:
        destination.write(text)


def _parse_pose(tokens, line_no):
    try:
        x, y, z, qx, qy, qz, qw = (float(v) for v in tokens)
    except ValueError as exc:
        bad = next(v for v in tokens if not _is_float(v))
        raise ParseError("expected a real number", line_no, bad) from exc
    q = np.array([qx, qy, qz, qw])
    if not np.all(np.isfinite(q)) or np.linalg.norm(q) < 1e-12:
        raise ParseError("degenerate quaternion", line_no, " ".join(tokens[3:]))
    return Pose3(Rotation.from_quat(q).as_matrix(), [x, y, z])


def _is_float(v):
    try:
        float(v)
    except ValueError:
        return False
    return True


def _parse_key(token, line_no):
    try:
        return GlobalKey.decode(int(token))
    except ValueError as exc:
        raise ParseError("expected an unsigned 64-bit vertex id", line_no, token) from exc


def read_g2o(source, owner: int | None = None) -> PoseGraph:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="ascii") as fh:
            text = fh.read()
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        text = source.read()
    else:
        text = str(source)
    poses, odometry, closures = {}, [], []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        tag = tokens[0]
        if tag == VERTEX_TAG:
            if len(tokens) != 9:
                raise ParseError(f"{VERTEX_TAG} needs 8 fields, got {len(tokens) - 1}", line_no, raw.strip())
            key = _parse_key(tokens[1], line_no)
            if key in poses:
                raise ParseError(f"duplicate vertex {key}", line_no, tokens[1])
            poses[key] = _parse_pose(tokens[2:9], line_no)
        elif tag == EDGE_TAG:
            if len(tokens) != 31:
                raise ParseError(f"{EDGE_TAG} needs 30 fields, got {len(tokens) - 1}", line_no, raw.strip())
            src = _parse_key(tokens[1], line_no)
            dst = _parse_key(tokens[2], line_no)
            pose = _parse_pose(tokens[3:10], line_no)
            try:
                upper = np.array([float(v) for v in tokens[10:31]])
            except ValueError as exc:
                bad = next(v for v in tokens[10:31] if not _is_float(v))
                raise ParseError("expected a real number", line_no, bad) from exc
            g2o_info = np.zeros((6, 6))
            g2o_info[_IU] = upper
            g2o_info = g2o_info + np.triu(g2o_info, 1).T
            info = np.empty((6, 6))
            info[np.ix_(_G2O_PERM, _G2O_PERM)] = g2o_info
            if src.robot_id == dst.robot_id:
                if dst.keyframe_index != src.keyframe_index + 1:
                    raise ParseError("intra-robot edges must join consecutive keyframes", line_no, f"{src}->{dst}")
                odometry.append(MeasurementEdge(src, dst, pose, info, EdgeKind.ODOMETRY))
            else:
                closures.append(MeasurementEdge(src, dst, pose, info, EdgeKind.INTER_ROBOT))
        else:
            raise ParseError("unknown record type", line_no, tag)
    if owner is None:
        robots = sorted({k.robot_id for k in poses})
        owner = robots[0] if robots else 0
    return PoseGraph(owner=owner, poses=poses, odometry=odometry, loop_closures=closures)


def split_by_robot(graph: PoseGraph) -> dict[int, PoseGraph]:
    """One graph per robot; each inter-robot edge is copied to both endpoints."""
    out = {r: PoseGraph(owner=r) for r in graph.robots()}
    for k, p in graph.poses.items():
        out[k.robot_id].poses[k] = p
    for e in graph.odometry:
        out.setdefault(e.source.robot_id, PoseGraph(owner=e.source.robot_id)).odometry.append(e)
    for e in graph.loop_closures:
        for r in (e.source.robot_id, e.target.robot_id):
            out.setdefault(r, PoseGraph(owner=r)).loop_closures.append(e)
    return out
