"""Range-limited synchronous message bus with per-message byte accounting."""

from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ConfigError

KIB = 1024


class MessageType(str, enum.Enum):
    DESCRIPTOR_BATCH = "descriptor_batch"
    VERIFICATION_PAYLOAD = "verification_payload"
    LOOP_CLOSURE = "loop_closure"
    POSE_ESTIMATE = "pose_estimate"


@dataclass(frozen=True)
class ByteModel:
    """Per-item message sizes in bytes (1 kB = 1024 B, rounded to whole bytes)."""

    descriptor: int = round(1.00 * KIB)
    keypoint_info: int = round(34.51 * KIB)
    keypoint_descriptors: int = round(25.00 * KIB)
    pose_estimate: int = round(0.34 * KIB)
    loop_closure: int = round(0.34 * KIB)

    def size(self, message: Message) -> int:
        per_item = {
            MessageType.DESCRIPTOR_BATCH: self.descriptor,
            MessageType.VERIFICATION_PAYLOAD: self.keypoint_info + self.keypoint_descriptors,
            MessageType.LOOP_CLOSURE: self.loop_closure,
            MessageType.POSE_ESTIMATE: self.pose_estimate,
        }[message.type]
        return per_item * message.count


@dataclass(frozen=True)
class Message:
    type: MessageType
    count: int = 1
    payload: Any = None
    key_count: int = 0


@dataclass(frozen=True)
class Envelope:
    sender: int
    receiver: int
    message: Message
    bytes: int
    round: int
    seq: int


@dataclass(frozen=True)
class LogRecord:
    round: int
    sender: int
    receiver: int
    type: str
    bytes: int
    key_count: int
    delivered: bool


@dataclass(frozen=True)
class NetworkConfig:
    comm_range: float = 20.0
    round_length: float = 0.1

    def __post_init__(self):
        if not self.comm_range > 0:
            raise ConfigError("comm_range must be positive")
        if not self.round_length > 0:
            raise ConfigError("round_length must be positive")


def connectivity(positions: dict, cfg: NetworkConfig) -> set:
    """Robot pairs ``(a, b)``, ``a < b``, within the closed communication ball."""
    pairs = set()
    for a, b in itertools.combinations(sorted(positions), 2):
        pa = np.asarray(positions[a], dtype=float)
        pb = np.asarray(positions[b], dtype=float)
        if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
            raise ValueError("positions must be finite")
        if math.dist(pa, pb) <= cfg.comm_range:
            pairs.add((a, b))
    return pairs


def static_positions(positions: dict) -> Callable[[float], dict]:
    fixed = {k: np.asarray(v, dtype=float) for k, v in positions.items()}
    return lambda _time: fixed


class Network:
    """Messages sent in round ``r`` arrive in round ``r + 1`` if still in range.

    Delivery within a round is ordered by ``(sender, seq)``; undeliverable
    envelopes are dropped and logged.
    """

    def __init__(self, cfg: NetworkConfig, positions: Callable[[float], dict], byte_model: ByteModel | None = None,
                 start_round: int = 0):
        self.cfg = cfg
        self.positions = positions
        self.byte_model = byte_model or ByteModel()
        self.round = start_round
        self.queue: list[Envelope] = []
        self.log: list[LogRecord] = []
        self._seq = itertools.count()
        self._links_cache: tuple[int, set] | None = None
        self._last_positions = None

    @property
    def time(self) -> float:
        return self.round * self.cfg.round_length

    def links(self, round_: int | None = None) -> set:
        r = self.round if round_ is None else round_
        if self._links_cache is None or self._links_cache[0] != r:
            positions = self.positions(r * self.cfg.round_length)
            if positions is self._last_positions:
                # the same mapping object means nothing moved (static layouts)
                links = self._links_cache[1]
            else:
                links = connectivity(positions, self.cfg)
            self._links_cache = (r, links)
            self._last_positions = positions
        return self._links_cache[1]

    def connected(self, a: int, b: int, round_: int | None = None) -> bool:
        return a == b or (min(a, b), max(a, b)) in self.links(round_)

    def send(self, sender: int, receiver: int, message: Message) -> Envelope:
        env = Envelope(sender, receiver, message, self.byte_model.size(message), self.round, next(self._seq))
        self.queue.append(env)
        return env

    def deliver_round(self) -> list[Envelope]:
        self.round += 1
        pending = sorted(self.queue, key=lambda e: (e.sender, e.seq))
        self.queue = []
        delivered = []
        for env in pending:
            ok = self.connected(env.sender, env.receiver)
            self.log.append(LogRecord(self.round, env.sender, env.receiver, env.message.type.value,
                                      env.bytes, env.message.key_count, ok))
            if ok:
                delivered.append(env)
        return delivered

    def advance_to(self, time: float):
        """Run idle rounds until the clock reaches ``time``."""
        target = math.ceil(time / self.cfg.round_length - 1e-9)
        while self.queue and self.round < target:
            self.deliver_round()
        self.round = max(self.round, target)

    def total_bytes(self, delivered: bool | None = None, types=None) -> int:
        return sum(
            r.bytes for r in self.log
            if (delivered is None or r.delivered == delivered) and (types is None or r.type in types)
        )


ENVELOPE_COLUMNS = ["round", "sender", "receiver", "type", "bytes", "delivered"]
EXCHANGE_COLUMNS = ["round", "sender", "receiver", "message_type", "bytes", "key_count"]


def write_envelope_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENVELOPE_COLUMNS)
        for r in records:
            w.writerow([r.round, r.sender, r.receiver, r.type, r.bytes, int(r.delivered)])


def write_exchange_log(records, path):
    """Delivered messages only, in the shared byte-log schema."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXCHANGE_COLUMNS)
        for r in records:
            if r.delivered:
                w.writerow([r.round, r.sender, r.receiver, r.type, r.bytes, r.key_count])
