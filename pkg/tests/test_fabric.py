"""Reliable in-order delivery in virtual time."""

import pytest

from ibcr.adapters.fabric import Fabric
from ibcr.domain.errors import AddressUnknown
from ibcr.domain.errors import FabricError
from ibcr.domain.errors import RebindWhileActive
from ibcr.domain.errors import SelfConnectRejected
from ibcr.domain.errors import SendSuppressed
from ibcr.domain.models import FabricConfig
from ibcr.domain.models import Frame
from ibcr.domain.models import FrameKind
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import TransportMode


A = NodeAddr(0, 0)
B = NodeAddr(1, 0)


def make_fabric(**config) -> tuple[Fabric, list]:
    fabric = Fabric(FabricConfig(**config))
    seen = []
    for addr in (A, B):
        fabric.register(addr)
        fabric.attach(addr, lambda frame, src, dst: seen.append((dst, frame)))
    return fabric, seen


def data(payload: bytes) -> Frame:
    return Frame(0, 0, FrameKind.SEND_DATA, payload)


def test_delivery_waits_for_delay():
    fabric, seen = make_fabric(delivery_delay_ticks=3)
    conn = fabric.connect(A, B)
    assert fabric.send(conn, A, data(b"x")) == 1
    fabric.advance(2)
    assert seen == []
    assert fabric.next_due() == 3
    fabric.advance(1)
    assert [(dst, f.payload, f.seq) for dst, f in seen] == [(B, b"x", 1)]
    assert fabric.in_flight() == 0


def test_advance_zero_is_noop():
    fabric, seen = make_fabric(delivery_delay_ticks=0)
    conn = fabric.connect(A, B)
    fabric.send(conn, A, data(b"x"))
    assert fabric.advance(0) == 0
    assert seen == []
    assert fabric.advance(1) == 1


def test_jitter_never_reorders_a_connection():
    fabric, seen = make_fabric(delivery_delay_ticks=1, delivery_jitter_ticks=40, rng_seed=5)
    conn = fabric.connect(A, B)
    for i in range(50):
        fabric.send(conn, A, data(bytes([i])))
        fabric.advance(1)
    fabric.advance(1000)
    assert [f.seq for _, f in seen] == list(range(1, 51))
    assert [f.payload for _, f in seen] == [bytes([i]) for i in range(50)]


def test_directions_are_sequenced_independently():
    fabric, seen = make_fabric()
    conn = fabric.connect(A, B)
    fabric.send(conn, A, data(b"a"))
    assert fabric.send(conn, B, data(b"b")) == 1
    fabric.advance(5)
    assert {(dst, f.seq) for dst, f in seen} == {(A, 1), (B, 1)}


def test_self_connection_rejected_but_ports_on_one_host_connect():
    fabric, _ = make_fabric()
    with pytest.raises(SelfConnectRejected):
        fabric.connect(A, A)
    neighbour = NodeAddr(0, 1)
    fabric.register(neighbour)
    assert fabric.connect(A, neighbour) > 0


def test_unknown_endpoint():
    fabric, _ = make_fabric()
    with pytest.raises(AddressUnknown):
        fabric.connect(A, NodeAddr(9, 0))
    with pytest.raises(FabricError):
        fabric.register(NodeAddr(0, 8))


def test_quiesce_suppresses_application_sends_only():
    fabric, seen = make_fabric(delivery_delay_ticks=2)
    conn = fabric.connect(A, B)
    fabric.send(conn, A, data(b"early"))
    assert fabric.quiesce(A) == 1
    with pytest.raises(SendSuppressed):
        fabric.send(conn, A, data(b"late"))
    fabric.send(conn, A, Frame(0, 0, FrameKind.DELIVERY_ACK, b"ack"), app_originated=False)
    fabric.advance(5)
    assert [f.payload for _, f in seen] == [b"early", b"ack"]
    fabric.unquiesce(A)
    fabric.send(conn, A, data(b"again"))
    assert not fabric.is_quiesced(A)


def test_discard_then_rebind():
    fabric, seen = make_fabric(delivery_delay_ticks=5)
    conn = fabric.connect(A, B)
    fabric.send(conn, A, data(b"lost"))
    with pytest.raises(RebindWhileActive):
        fabric.teardown_and_rebind(A, TransportMode.STREAM)
    assert fabric.discard(A) == 1
    fabric.advance(10)
    assert seen == []
    fabric.teardown_and_rebind(A, TransportMode.STREAM)
    assert fabric.mode_of(A) == TransportMode.STREAM
    assert fabric.mode_of(B) == TransportMode.IN_PROCESS


def test_delivery_log_is_deterministic():
    def run():
        fabric, _ = make_fabric(delivery_jitter_ticks=7, rng_seed=11)
        conn = fabric.connect(A, B)
        for i in range(20):
            fabric.send(conn, A if i % 2 else B, data(bytes([i]) * 8))
        fabric.advance(100)
        return fabric.delivery_log

    assert run() == run()
