"""Simulated distributed loop-closure detection.

Robots hold a store of 128-d place descriptors.  When two robots meet, the
lower id sends the descriptors created since their last encounter, the peer
answers with verification payloads for matched keyframes, and the initiator
returns the loop closures that pass a synthetic geometric verification.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import ConfigError, ConnectivityLost, DimensionMismatch
from .network import Message, MessageType, Network
from .posegraph import EdgeKind, GlobalKey, MeasurementEdge, PoseGraph
from .world import World, diag_information, perturb

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
_PLACE_STREAM = 0xD5
_VERIFY_STREAM = 0xE7


class FrontendMode(str, enum.Enum):
    DIRECT_INJECTION = "direct_injection"
    DESCRIPTOR_SIM = "descriptor_sim"


class SessionPhase(enum.IntEnum):
    IDLE = 0
    DESCRIPTORS_SENT = 1
    MATCHES_RETURNED = 2
    VERIFIED = 3


@dataclass(frozen=True)
class FrontendConfig:
    descriptor_match_threshold: float = 0.13
    min_correspondences: int = 5
    sigma_rot: float = 0.01
    sigma_trans: float = 0.1
    outlier_fraction: float = 0.3
    outlier_rot_range: tuple = (0.3, 0.3, 0.3)
    outlier_trans_range: tuple = (5.0, 5.0, 1.0)
    mode: FrontendMode = FrontendMode.DIRECT_INJECTION
    # simulated correspondence counts: binomial over max_features
    max_features: int = 40
    true_match_mean: float = 12.0
    alias_match_mean: float = 3.0
    # descriptor place model (descriptor_sim mode)
    place_cell: float = 6.0
    descriptor_noise: float = 0.0075
    alias_fraction: float = 0.15
    alias_jitter: float = 0.08
    # direct injection: keyframes closer than this observe the same place
    place_radius: float = 14.0

    def __post_init__(self):
        object.__setattr__(self, "mode", FrontendMode(self.mode))
        object.__setattr__(self, "outlier_rot_range", tuple(float(v) for v in self.outlier_rot_range))
        object.__setattr__(self, "outlier_trans_range", tuple(float(v) for v in self.outlier_trans_range))
        if self.descriptor_match_threshold <= 0 or self.place_radius <= 0 or self.min_correspondences < 0:
            raise ConfigError("thresholds must be positive, min_correspondences non-negative")
        if self.sigma_rot < 0 or self.sigma_trans < 0:
            raise ConfigError("measurement sigmas must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError("outlier_fraction must lie in [0, 1)")
        if len(self.outlier_rot_range) != 3 or len(self.outlier_trans_range) != 3:
            raise ConfigError("outlier ranges need one bound per axis")
        if not 0 <= self.true_match_mean <= self.max_features or not 0 <= self.alias_match_mean <= self.max_features:
            raise ConfigError("correspondence means must lie in [0, max_features]")

    @property
    def information(self) -> np.ndarray:
        return diag_information(self.sigma_rot, self.sigma_trans)


@dataclass(frozen=True, eq=False)
class PlaceDescriptor:
    key: GlobalKey
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.shape != (DESCRIPTOR_DIM,):
            raise DimensionMismatch(f"descriptor must have {DESCRIPTOR_DIM} entries, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor entries must be finite")
        object.__setattr__(self, "vector", v)


@dataclass
class PeerState:
    last_exchanged: int = -1
    phase: SessionPhase = SessionPhase.IDLE


class RendezvousState(dict):
    """``peer id -> PeerState``; entries are created on first access."""

    def __missing__(self, peer):
        self[peer] = PeerState()
        return self[peer]

    def acknowledge(self, peer: int, keyframe_index: int):
        st = self[peer]
        st.last_exchanged = max(st.last_exchanged, keyframe_index)


@dataclass(frozen=True, eq=False)
class Candidate:
    """Inter-robot loop closure with the generator's ground-truth label."""

    id: int
    edge: MeasurementEdge
    true_inlier: bool
    correspondences: int
    round: int


@dataclass
class RobotAgent:
    robot_id: int
    descriptors: list = field(default_factory=list)
    graph: PoseGraph = None
    state: RendezvousState = field(default_factory=RendezvousState)
    candidates: list = field(default_factory=list)

    def __post_init__(self):
        if self.graph is None:
            self.graph = PoseGraph(owner=self.robot_id)

    @property
    def latest(self) -> GlobalKey | None:
        return self.descriptors[-1].key if self.descriptors else None

    def store_matrix(self) -> np.ndarray:
        if not self.descriptors:
            return np.zeros((0, DESCRIPTOR_DIM))
        return np.stack([d.vector for d in self.descriptors])


def descriptor_delta(agent: RobotAgent, peer: int) -> list:
    """Descriptors created after the last exchange with ``peer`` (all on first contact)."""
    last = agent.state[peer].last_exchanged
    return [d for d in agent.descriptors if d.key.keyframe_index > last]


def match_descriptors(received, local_store, threshold: float) -> list:
    """Pairs ``(received key, local key)`` within Euclidean ``threshold``."""
    received = list(received)
    local_store = list(local_store)
    if not received or not local_store:
        return []
    a = np.stack([np.asarray(d.vector, dtype=float) for d in received])
    b = np.stack([np.asarray(d.vector, dtype=float) for d in local_store])
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"descriptor sizes differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    hits = np.argwhere(dist <= threshold)
    seen, out = set(), []
    for i, j in hits:
        pair = (received[i].key, local_store[j].key)
        if pair not in seen:
            seen.add(pair)
            out.append(pair)
    return out


class PlaceModel:
    """Descriptors as a function of ground-truth place.

    A place is a horizontal grid cell.  Some cells alias another cell: their
    base descriptor is the partner's plus a small jitter.
    """

    def __init__(self, cfg: FrontendConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self._base: dict = {}

    def cell(self, position) -> tuple:
        c = self.cfg.place_cell
        return int(np.floor(position[0] / c)), int(np.floor(position[1] / c))

    def _rng(self, *parts):
        return np.random.default_rng(np.random.SeedSequence([self.seed, _PLACE_STREAM, *parts]))

    def alias_of(self, cell) -> tuple | None:
        rng = self._rng(1, cell[0] & 0xFFFF, cell[1] & 0xFFFF)
        if rng.random() >= self.cfg.alias_fraction:
            return None
        return cell[0] + int(rng.integers(2, 6)), cell[1] + int(rng.integers(-3, 4))

    def _unit(self, cell):
        v = self._rng(2, cell[0] & 0xFFFF, cell[1] & 0xFFFF).normal(size=DESCRIPTOR_DIM)
        return v / np.linalg.norm(v)

    def base(self, cell) -> np.ndarray:
        if cell not in self._base:
            partner = self.alias_of(cell)
            if partner is None:
                v = self._unit(cell)
            else:
                jitter = self._rng(3, cell[0] & 0xFFFF, cell[1] & 0xFFFF).normal(size=DESCRIPTOR_DIM)
                v = self._unit(partner) + self.cfg.alias_jitter * jitter / np.sqrt(DESCRIPTOR_DIM)
            self._base[cell] = v
        return self._base[cell]

    def observe(self, key: GlobalKey, position) -> PlaceDescriptor:
        rng = self._rng(4, key.encode())
        scale = self.cfg.descriptor_noise * rng.uniform(0.5, 1.5)
        return PlaceDescriptor(key, self.base(self.cell(position)) + rng.normal(0.0, scale, DESCRIPTOR_DIM))

    def same_place(self, pa, pb) -> bool:
        return self.cell(pa) == self.cell(pb)


def place_matches(received, local_store, world: World, radius: float) -> list:
    """Ground-truth place matching: pairs whose keyframe positions lie within ``radius``."""
    if not received or not local_store:
        return []
    pa = np.array([world.gt(d.key).translation for d in received])
    pb = np.array([world.gt(d.key).translation for d in local_store])
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    return [(received[i].key, local_store[j].key) for i, j in np.argwhere(dist <= radius)]


def verification_rng(seed: int, ka: GlobalKey, kb: GlobalKey) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _VERIFY_STREAM, ka.encode(), kb.encode()]))


def sample_outlier(cfg: FrontendConfig, rng) -> se3.Pose3:
    w = rng.uniform(-1.0, 1.0, 3) * np.array(cfg.outlier_rot_range)
    t = rng.uniform(-1.0, 1.0, 3) * np.array(cfg.outlier_trans_range)
    return se3.Pose3(se3.so3_exp(w), t)


def simulated_verification(pair, world: World, cfg: FrontendConfig, rng, true_place: bool = True):
    """Synthetic geometric verification of a putative match ``(a key, b key)``.

    Returns ``(edge, is_inlier, correspondences)``, or ``None`` when too few
    correspondences survive.
    """
    ka, kb = pair
    mean = cfg.true_match_mean if true_place else cfg.alias_match_mean
    n_corr = int(rng.binomial(cfg.max_features, mean / cfg.max_features)) if cfg.max_features else 0
    inlier = true_place and rng.random() >= cfg.outlier_fraction
    if inlier:
        truth = se3.between(world.gt(ka), world.gt(kb))
        pose = perturb(truth, cfg.sigma_rot, cfg.sigma_trans, rng)
    else:
        pose = sample_outlier(cfg, rng)
    if n_corr < cfg.min_correspondences:
        return None
    edge = MeasurementEdge(ka, kb, pose, cfg.information, EdgeKind.INTER_ROBOT)
    return edge, inlier, n_corr


@dataclass
class RendezvousResult:
    candidates: list
    records: list
    matches: list


def _deliver(network: Network, expect: int, what: str, a: int, b: int, start: int):
    delivered = network.deliver_round()
    if len(delivered) < expect:
        raise ConnectivityLost(f"robots {a} and {b} lost contact during {what}", network.log[start:])
    return delivered


def run_rendezvous(agent_a: RobotAgent, agent_b: RobotAgent, network: Network, cfg: FrontendConfig,
                   world: World, places: PlaceModel | None = None, seed: int = 0,
                   next_id: int = 0) -> RendezvousResult:
    """One descriptor / verification / loop-closure round trip.

    ``agent_a`` must be the lower robot id.  On :class:`ConnectivityLost` the
    session keeps whatever phase was last completed.
    """
    a, b = agent_a.robot_id, agent_b.robot_id
    if a >= b:
        raise ValueError("the lower robot id initiates")
    start = len(network.log)
    st_a, st_b = agent_a.state[b], agent_b.state[a]
    delta = descriptor_delta(agent_a, b)
    if not delta:
        return RendezvousResult([], [], [])
    if not network.connected(a, b):
        raise ConnectivityLost(f"robots {a} and {b} are not in range")

    network.send(a, b, Message(MessageType.DESCRIPTOR_BATCH, len(delta), tuple(d.key for d in delta), len(delta)))
    _deliver(network, 1, "descriptor exchange", a, b, start)
    agent_a.state.acknowledge(b, delta[-1].key.keyframe_index)
    agent_b.state.acknowledge(a, delta[-1].key.keyframe_index)
    st_a.phase = st_b.phase = SessionPhase.DESCRIPTORS_SENT

    if cfg.mode is FrontendMode.DIRECT_INJECTION:
        matches = place_matches(delta, agent_b.descriptors, world, cfg.place_radius)
    else:
        matches = match_descriptors(delta, agent_b.descriptors, cfg.descriptor_match_threshold)
    if not matches:
        st_a.phase = st_b.phase = SessionPhase.IDLE
        return RendezvousResult([], network.log[start:], [])

    b_frames = sorted({kb for _, kb in matches})
    network.send(b, a, Message(MessageType.VERIFICATION_PAYLOAD, len(b_frames), tuple(matches), len(b_frames)))
    _deliver(network, 1, "verification payload", a, b, start)
    st_a.phase = st_b.phase = SessionPhase.MATCHES_RETURNED

    results = []
    for ka, kb in matches:
        if cfg.mode is FrontendMode.DIRECT_INJECTION:
            true_place = True
        else:
            true_place = places.same_place(world.gt(ka).translation, world.gt(kb).translation)
        out = simulated_verification((ka, kb), world, cfg, verification_rng(seed, ka, kb), true_place)
        if out is not None:
            results.append(out)
    if results:
        n = len(results)
        edges = tuple(r[0] for r in results)
        network.send(a, b, Message(MessageType.LOOP_CLOSURE, n, edges, n))
        network.send(a, b, Message(MessageType.POSE_ESTIMATE, n, tuple(e.source for e in edges), n))
        _deliver(network, 2, "loop-closure return", a, b, start)
    candidates = []
    for i, (edge, inlier, n_corr) in enumerate(results):
        cand = Candidate(next_id + i, edge, inlier, n_corr, network.round)
        candidates.append(cand)
        agent_a.candidates.append(cand)
        agent_b.candidates.append(cand)
        agent_a.graph.add_loop_closure(edge)
        agent_b.graph.add_loop_closure(edge)
    st_a.phase = st_b.phase = SessionPhase.VERIFIED
    st_a.phase = st_b.phase = SessionPhase.IDLE
    return RendezvousResult(candidates, network.log[start:], matches)


@dataclass
class MissionResult:
    world: World
    agents: dict
    candidates: list
    network: Network
    rendezvous: int = 0
    aborted_sessions: int = 0

    def graphs(self) -> dict:
        return {r: ag.graph for r, ag in self.agents.items()}


def simulate_mission(world: World, network: Network, cfg: FrontendConfig, seed: int) -> MissionResult:
    """Step through keyframes, running a rendezvous for each pair in range."""
    places = PlaceModel(cfg, seed)
    agents = {r: RobotAgent(r) for r in world.robots}
    period = world.config.keyframe_period
    result = MissionResult(world, agents, [], network)
    for k in range(world.config.keyframes_per_robot):
        network.advance_to(k * period)
        for r, ag in agents.items():
            key = GlobalKey(r, k)
            ag.descriptors.append(places.observe(key, world.gt(key).translation))
            if k:
                edge = world.odometry[r][k - 1]
                ag.graph.add_odometry(edge)
                ag.graph.poses[key] = se3.compose(ag.graph.poses[edge.source], edge.relative_pose)
            else:
                ag.graph.poses[key] = se3.Pose3.identity()
        for a, b in sorted(network.links()):
            try:
                rv = run_rendezvous(agents[a], agents[b], network, cfg, world, places, seed, len(result.candidates))
            except ConnectivityLost as exc:
                log.debug("rendezvous aborted: %s", exc)
                result.aborted_sessions += 1
                continue
            if rv.records:
                result.rendezvous += 1
            result.candidates.extend(rv.candidates)
    return result
