import numpy as np
import pytest

from distslam.errors import ConfigError
from distslam.network import (
    ByteModel, Message, MessageType, Network, NetworkConfig, connectivity, static_positions, write_envelope_log,
)


def test_same_point_and_boundary():
    cfg = NetworkConfig(comm_range=30.0)
    assert connectivity({0: (0, 0, 0), 1: (0, 0, 0)}, cfg) == {(0, 1)}
    assert connectivity({0: (0, 0, 0), 1: (30.0, 0, 0)}, cfg) == {(0, 1)}
    assert connectivity({0: (0, 0, 0), 1: (30.0 + 1e-9, 0, 0)}, cfg) == set()


def test_line_of_five():
    pos = {i: (25.0 * i, 0.0, 0.0) for i in range(5)}
    links = connectivity(pos, NetworkConfig(comm_range=30.0))
    # pairwise distance oracle
    expected = {(a, b) for a in range(5) for b in range(a + 1, 5) if abs(25.0 * (a - b)) <= 30.0}
    assert links == expected == {(0, 1), (1, 2), (2, 3), (3, 4)}


def test_non_finite_positions():
    with pytest.raises(ValueError):
        connectivity({0: (np.nan, 0, 0), 1: (0, 0, 0)}, NetworkConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(comm_range=0)
    with pytest.raises(ConfigError):
        NetworkConfig(round_length=-1)


def test_byte_model_constants():
    bm = ByteModel()
    assert bm.descriptor == 1024
    assert bm.keypoint_info == 35338 and bm.keypoint_descriptors == 25600
    assert bm.pose_estimate == bm.loop_closure == 348
    assert bm.size(Message(MessageType.DESCRIPTOR_BATCH, 7)) == 7 * 1024
    assert bm.size(Message(MessageType.VERIFICATION_PAYLOAD, 2)) == 2 * (35338 + 25600)


def test_delivery_next_round():
    net = Network(NetworkConfig(), static_positions({0: (0, 0, 0), 1: (1, 0, 0)}))
    env = net.send(0, 1, Message(MessageType.POSE_ESTIMATE, 2))
    assert env.round == 0 and env.bytes == 696
    out = net.deliver_round()
    assert out == [env]
    assert net.round == 1
    assert net.log[0].delivered and net.log[0].round == 1


def test_separation_drops():
    def moving(t):
        return {0: np.zeros(3), 1: np.array([5.0 if t < 0.05 else 500.0, 0, 0])}

    net = Network(NetworkConfig(comm_range=20.0, round_length=0.1), moving)
    assert net.connected(0, 1)
    net.send(0, 1, Message(MessageType.LOOP_CLOSURE))
    assert net.deliver_round() == []
    rec = net.log[-1]
    assert not rec.delivered and rec.bytes == 348
    assert net.total_bytes(delivered=False) == 348 and net.total_bytes(delivered=True) == 0


def _interleaved_log():
    net = Network(NetworkConfig(), static_positions({r: (r, 0, 0) for r in range(3)}))
    net.send(2, 0, Message(MessageType.POSE_ESTIMATE, 1))
    net.send(0, 1, Message(MessageType.LOOP_CLOSURE, 2))
    net.send(1, 2, Message(MessageType.DESCRIPTOR_BATCH, 3))
    net.send(0, 2, Message(MessageType.POSE_ESTIMATE, 4))
    order = [(e.sender, e.receiver) for e in net.deliver_round()]
    return order, list(net.log)


def test_delivery_order_replays():
    order, log = _interleaved_log()
    assert order == [(0, 1), (0, 2), (1, 2), (2, 0)]
    assert _interleaved_log() == (order, log)


def test_byte_partition(tmp_path):
    def pos(t):
        return {0: np.zeros(3), 1: np.array([1.0, 0, 0]), 2: np.array([100.0 * t, 0, 0])}

    net = Network(NetworkConfig(comm_range=20.0, round_length=1.0), pos)
    for r in range(3):
        net.send(0, 1, Message(MessageType.POSE_ESTIMATE, r + 1))
        net.send(0, 2, Message(MessageType.DESCRIPTOR_BATCH, r + 1))
        net.deliver_round()
    total = sum(r.bytes for r in net.log)
    assert net.total_bytes() == total == net.total_bytes(True) + net.total_bytes(False)
    # never deliver across the range limit
    for rec in net.log:
        assert rec.delivered == net.connected(rec.sender, rec.receiver, rec.round)
    path = tmp_path / "env.csv"
    write_envelope_log(net.log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,sender,receiver,type,bytes,delivered"
    assert len(lines) == 7


def test_advance_to_flushes_queue():
    net = Network(NetworkConfig(round_length=0.5), static_positions({0: (0, 0, 0), 1: (0, 0, 0)}))
    net.send(0, 1, Message(MessageType.POSE_ESTIMATE))
    net.advance_to(2.0)
    assert net.round == 4 and not net.queue and net.log[0].delivered
