"""Seeded ground-truth trajectories and noisy odometry for a robot team."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import ConfigError
from .posegraph import EdgeKind, GlobalKey, MeasurementEdge, PoseGraph
from .se3 import Pose3

# information matrices are built from max(sigma, MIN_SIGMA) so noiseless
# worlds still carry finite weights
MIN_SIGMA = 1e-6
_WORLD_STREAM = 0x57


class Trajectory(str, enum.Enum):
    RANDOM_WALK = "random_walk"
    CIRCLE = "circle"
    GRID_LAWNMOWER = "grid_lawnmower"


@dataclass(frozen=True)
class WorldConfig:
    n_robots: int = 5
    keyframes_per_robot: int = 30
    trajectory: Trajectory = Trajectory.RANDOM_WALK
    arena: tuple = (40.0, 40.0, 10.0)
    odom_sigma_rot: float = 0.01
    odom_sigma_trans: float = 0.1
    seed: int = 0
    step_length: float = 2.0
    turn_sigma: float = 0.35
    tilt_sigma: float = 0.03
    start_spread: float = 2.0
    keyframe_period: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "trajectory", Trajectory(self.trajectory))
        object.__setattr__(self, "arena", tuple(float(v) for v in self.arena))
        if self.n_robots < 1 or self.keyframes_per_robot < 1:
            raise ConfigError("n_robots and keyframes_per_robot must be positive")
        if self.n_robots > 256:
            raise ConfigError("at most 256 robots fit in a global key")
        if len(self.arena) != 3 or min(self.arena) <= 0 or not all(map(math.isfinite, self.arena)):
            raise ConfigError("arena must be three positive finite extents")
        if self.odom_sigma_rot < 0 or self.odom_sigma_trans < 0:
            raise ConfigError("odometry sigmas must be non-negative")
        if self.step_length <= 0 or self.keyframe_period <= 0:
            raise ConfigError("step_length and keyframe_period must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


def robot_rng(seed: int, robot_id: int, stream: int = _WORLD_STREAM) -> np.random.Generator:
    """Generator for one robot; independent of how many robots exist."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) ^ int(robot_id), spawn_key=(stream,)))


def diag_information(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    sr = max(sigma_rot, MIN_SIGMA)
    st = max(sigma_trans, MIN_SIGMA)
    return np.diag([1 / sr**2] * 3 + [1 / st**2] * 3)


def perturb(pose: Pose3, sigma_rot: float, sigma_trans: float, rng) -> Pose3:
    """Right-multiply by ``Exp(eps)`` with independent Gaussian components."""
    eps = np.concatenate([rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3)])
    return se3.compose(pose, se3.exp_map(eps))


def _yaw_pose(x, y, z, yaw, roll=0.0, pitch=0.0) -> Pose3:
    rz = se3.so3_exp([0.0, 0.0, yaw])
    tilt = se3.so3_exp([roll, pitch, 0.0])
    return Pose3(rz @ tilt, [x, y, z])


def _random_walk(cfg: WorldConfig, robot_id: int, rng) -> list[Pose3]:
    ax, ay, az = cfg.arena
    heading = 2 * math.pi * robot_id / cfg.n_robots + rng.uniform(-0.3, 0.3)
    ang = 2 * math.pi * robot_id / cfg.n_robots
    x = ax / 2 + cfg.start_spread * math.cos(ang)
    y = ay / 2 + cfg.start_spread * math.sin(ang)
    z = az / 2
    poses = []
    for _ in range(cfg.keyframes_per_robot):
        roll, pitch = rng.normal(0.0, cfg.tilt_sigma, 2)
        poses.append(_yaw_pose(x, y, z, heading, roll, pitch))
        heading += rng.normal(0.0, cfg.turn_sigma)
        nx = x + cfg.step_length * math.cos(heading)
        ny = y + cfg.step_length * math.sin(heading)
        if not (0.0 <= nx <= ax and 0.0 <= ny <= ay):
            # turn back toward the arena centre
            heading = math.atan2(ay / 2 - y, ax / 2 - x) + rng.normal(0.0, cfg.turn_sigma)
            nx = x + cfg.step_length * math.cos(heading)
            ny = y + cfg.step_length * math.sin(heading)
        x, y = min(max(nx, 0.0), ax), min(max(ny, 0.0), ay)
        z = min(max(z + rng.normal(0.0, 0.1 * cfg.step_length), 0.0), az)
    return poses


def _circle(cfg: WorldConfig, robot_id: int, rng) -> list[Pose3]:
    ax, ay, az = cfg.arena
    radius = 0.25 * min(ax, ay)
    phase = 2 * math.pi * robot_id / cfg.n_robots
    cx = ax / 2 + 0.5 * radius * math.cos(phase)
    cy = ay / 2 + 0.5 * radius * math.sin(phase)
    dtheta = cfg.step_length / radius
    poses = []
    for k in range(cfg.keyframes_per_robot):
        th = phase + k * dtheta
        poses.append(_yaw_pose(cx + radius * math.cos(th), cy + radius * math.sin(th), az / 2, th + math.pi / 2))
    return poses


def _lawnmower(cfg: WorldConfig, robot_id: int, rng) -> list[Pose3]:
    ax, ay, az = cfg.arena
    lane = ay / max(cfg.n_robots, 1)
    y0 = lane * (robot_id + 0.25)
    width = 0.25 * lane
    x, y, heading = 0.0, y0, 0.0
    poses = []
    for _ in range(cfg.keyframes_per_robot):
        poses.append(_yaw_pose(x, y, az / 2, heading))
        nx = x + cfg.step_length * math.cos(heading)
        if nx > ax or nx < 0.0:
            y = y0 + width if abs(y - y0) < 1e-9 else y0
            heading = math.pi - heading
            continue
        x = nx
    return poses


_GENERATORS = {
    Trajectory.RANDOM_WALK: _random_walk,
    Trajectory.CIRCLE: _circle,
    Trajectory.GRID_LAWNMOWER: _lawnmower,
}


@dataclass
class World:
    config: WorldConfig
    ground_truth: dict = field(default_factory=dict)   # GlobalKey -> Pose3
    odometry: dict = field(default_factory=dict)       # robot -> [MeasurementEdge]

    @property
    def robots(self) -> list[int]:
        return list(range(self.config.n_robots))

    def gt(self, key: GlobalKey) -> Pose3:
        return self.ground_truth[key]

    def position(self, robot_id: int, time: float) -> np.ndarray:
        """Ground-truth position at a simulated time, linear between keyframes."""
        s = min(max(time / self.config.keyframe_period, 0.0), self.config.keyframes_per_robot - 1)
        k = int(math.floor(s))
        frac = s - k
        p0 = self.ground_truth[GlobalKey(robot_id, k)].translation
        if frac == 0.0:
            return p0.copy()
        p1 = self.ground_truth[GlobalKey(robot_id, k + 1)].translation
        return (1 - frac) * p0 + frac * p1

    def positions(self, time: float) -> dict:
        return {r: self.position(r, time) for r in self.robots}

    def dead_reckoning(self, robot_id: int, upto: int | None = None) -> dict:
        """Odometry integrated from identity in the robot's own start frame."""
        pose = Pose3.identity()
        out = {GlobalKey(robot_id, 0): pose}
        for e in self.odometry[robot_id][: None if upto is None else upto]:
            pose = se3.compose(pose, e.relative_pose)
            out[e.target] = pose
        return out

    def robot_graph(self, robot_id: int, upto: int | None = None) -> PoseGraph:
        edges = self.odometry[robot_id][: None if upto is None else upto]
        return PoseGraph(owner=robot_id, poses=self.dead_reckoning(robot_id, upto), odometry=list(edges))

    def ground_truth_graph(self) -> PoseGraph:
        return PoseGraph(owner=0, poses=dict(sorted(self.ground_truth.items())))


def generate(cfg: WorldConfig) -> World:
    world = World(cfg)
    info = diag_information(cfg.odom_sigma_rot, cfg.odom_sigma_trans)
    for r in range(cfg.n_robots):
        rng = robot_rng(cfg.seed, r)
        traj = _GENERATORS[cfg.trajectory](cfg, r, rng)
        edges = []
        for k, pose in enumerate(traj):
            world.ground_truth[GlobalKey(r, k)] = pose
            if k:
                rel = se3.between(traj[k - 1], pose)
                meas = perturb(rel, cfg.odom_sigma_rot, cfg.odom_sigma_trans, rng)
                edges.append(MeasurementEdge(GlobalKey(r, k - 1), GlobalKey(r, k), meas, info, EdgeKind.ODOMETRY))
        world.odometry[r] = edges
    return world
