"""Verbs semantics of the simulated adapter."""

from types import SimpleNamespace

import pytest

from ibcr.adapters.fabric import Fabric
from ibcr.adapters.verbs import inline
from ibcr.adapters.verbs.engine import CQ_OVERRUN
from ibcr.adapters.verbs.engine import SRQ_LIMIT_REACHED
from ibcr.adapters.verbs.engine import VerbsEngine
from ibcr.adapters.verbs.engine import epoch_tag
from ibcr.domain.errors import AddressUnknown
from ibcr.domain.errors import InvalidQpState
from ibcr.domain.errors import InvalidRange
from ibcr.domain.errors import InvalidTransition
from ibcr.domain.errors import InvalidWorkRequest
from ibcr.domain.errors import LocalAccessError
from ibcr.domain.errors import QueueFull
from ibcr.domain.errors import RemoteAccessError
from ibcr.domain.errors import RemoteUnknown
from ibcr.domain.errors import StaleHandle
from ibcr.domain.models import AccessFlag
from ibcr.domain.models import FabricConfig
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Opcode
from ibcr.domain.models import QpState
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ScatterGather
from ibcr.domain.models import Transition
from ibcr.domain.models import WcStatus
from ibcr.domain.models import WorkRequest


A = NodeAddr(0, 0)
B = NodeAddr(1, 0)
ALL = AccessFlag.LOCAL_WRITE | AccessFlag.REMOTE_WRITE | AccessFlag.REMOTE_READ


def make_engine(epoch: int = 1, **config) -> VerbsEngine:
    fabric = Fabric(FabricConfig(**config))
    for addr in (A, B):
        fabric.register(addr)
    return VerbsEngine(fabric, epoch=epoch, memory_bytes=1 << 16)


def endpoint(engine: VerbsEngine, addr: NodeAddr, *, cq_capacity: int = 16, srq=False, max_wr: int = 8):
    ctx = engine.open_device(addr)
    pd = engine.alloc_pd(ctx)
    mr = engine.reg_mr(pd, 0, 4096, ALL)
    cq = engine.create_cq(ctx, cq_capacity)
    shared = engine.create_srq(pd, max_wr, 0) if srq else None
    qp = engine.create_qp(pd, cq, cq, shared, max_wr, max_wr)
    return SimpleNamespace(ctx=ctx, pd=pd, mr=mr, cq=cq, srq=shared, qp=qp)


def connect(engine: VerbsEngine, x, y) -> None:
    for me, other in ((x, y), (y, x)):
        engine.modify_qp(me.qp, Transition.to_init())
        engine.modify_qp(me.qp, Transition.to_rtr(other.ctx.lid, other.qp.qp_num))
        engine.modify_qp(me.qp, Transition.to_rts())


def pair(engine: VerbsEngine, **kwargs):
    x = endpoint(engine, A, **kwargs)
    y = endpoint(engine, B, **kwargs)
    connect(engine, x, y)
    return x, y


def send(wr_id: int, end, addr: int, length: int, **kwargs) -> WorkRequest:
    return WorkRequest(wr_id, Opcode.SEND, (ScatterGather(addr, length, end.mr.lkey),), **kwargs)


def recv(wr_id: int, end, addr: int, length: int) -> WorkRequest:
    return WorkRequest(wr_id, Opcode.RECV, (ScatterGather(addr, length, end.mr.lkey),))


def test_send_lands_in_posted_receive():
    engine = make_engine()
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(7, y, 100, 64))
    engine.write_memory(x.ctx, 0, b"hello")
    inline.post_send(x.qp, send(1, x, 0, 5))
    engine.progress(10)

    [got] = inline.poll_cq(y.cq, 4)
    assert (got.wr_id, got.status, got.opcode, got.byte_len) == (7, WcStatus.SUCCESS, Opcode.RECV, 5)
    assert engine.read_memory(y.ctx, 100, 5) == b"hello"
    [done] = inline.poll_cq(x.cq, 4)
    assert (done.wr_id, done.status, done.opcode) == (1, WcStatus.SUCCESS, Opcode.SEND)
    assert engine.queued_wr_ids(x.qp, QueueKind.SEND) == []


def test_send_completion_waits_for_the_ack():
    engine = make_engine(delivery_delay_ticks=3, completion_skew_ticks=3)
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(7, y, 100, 64))
    inline.post_send(x.qp, send(1, x, 0, 5))
    engine.progress(3)
    assert len(inline.poll_cq(y.cq, 4)) == 1
    assert inline.poll_cq(x.cq, 4) == []
    assert engine.queued_wr_ids(x.qp, QueueKind.SEND) == [1]
    engine.progress(3)
    assert [e.wr_id for e in inline.poll_cq(x.cq, 4)] == [1]


def test_unsignaled_send_completes_silently():
    engine = make_engine()
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(7, y, 100, 64))
    inline.post_send(x.qp, send(1, x, 0, 5, signaled=False))
    engine.progress(10)
    assert inline.poll_cq(x.cq, 4) == []
    assert engine.queued_wr_ids(x.qp, QueueKind.SEND) == []


def test_send_without_receive_fails_even_unsignaled():
    engine = make_engine()
    x, _ = pair(engine)
    inline.post_send(x.qp, send(1, x, 0, 5, signaled=False))
    engine.progress(10)
    [err] = inline.poll_cq(x.cq, 4)
    assert (err.wr_id, err.status, err.error) == (1, WcStatus.ERR, "REMOTE_NOT_READY")


def test_oversized_send_is_a_length_error_on_both_sides():
    engine = make_engine()
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(7, y, 100, 4))
    inline.post_send(x.qp, send(1, x, 0, 16))
    engine.progress(10)
    [r] = inline.poll_cq(y.cq, 4)
    [s] = inline.poll_cq(x.cq, 4)
    assert r.status == s.status == WcStatus.ERR
    assert r.error == s.error == "LENGTH_ERROR"


def test_rdma_write_with_imm_consumes_a_receive():
    engine = make_engine()
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(9, y, 0, 8))
    engine.write_memory(x.ctx, 0, b"abcd")
    wr = WorkRequest(
        2, Opcode.RDMA_WRITE_WITH_IMM, (ScatterGather(0, 4, x.mr.lkey),),
        remote_addr=2048, rkey=y.mr.rkey, imm=0xBEEF,
    )
    inline.post_send(x.qp, wr)
    engine.progress(10)
    [got] = inline.poll_cq(y.cq, 4)
    assert (got.wr_id, got.opcode, got.imm, got.byte_len) == (9, Opcode.RECV_RDMA_WITH_IMM, 0xBEEF, 4)
    assert engine.read_memory(y.ctx, 2048, 4) == b"abcd"


def test_plain_rdma_write_is_invisible_to_the_target():
    engine = make_engine()
    x, y = pair(engine)
    engine.write_memory(x.ctx, 0, b"zz")
    wr = WorkRequest(3, Opcode.RDMA_WRITE, (ScatterGather(0, 2, x.mr.lkey),), remote_addr=10, rkey=y.mr.rkey)
    inline.post_send(x.qp, wr)
    engine.progress(10)
    assert inline.poll_cq(y.cq, 4) == []
    assert engine.read_memory(y.ctx, 10, 2) == b"zz"
    assert [e.opcode for e in inline.poll_cq(x.cq, 4)] == [Opcode.RDMA_WRITE]


def test_rdma_read_scatters_remote_bytes():
    engine = make_engine()
    x, y = pair(engine)
    engine.write_memory(y.ctx, 512, b"remote!")
    wr = WorkRequest(4, Opcode.RDMA_READ, (ScatterGather(64, 7, x.mr.lkey),), remote_addr=512, rkey=y.mr.rkey)
    inline.post_send(x.qp, wr)
    engine.progress(10)
    [done] = inline.poll_cq(x.cq, 4)
    assert (done.opcode, done.byte_len) == (Opcode.RDMA_READ, 7)
    assert engine.read_memory(x.ctx, 64, 7) == b"remote!"


def test_bad_rkey_is_rejected_at_post():
    engine = make_engine()
    x, y = pair(engine)
    wr = WorkRequest(5, Opcode.RDMA_WRITE, (ScatterGather(0, 2, x.mr.lkey),), remote_addr=0, rkey=y.mr.rkey + 1)
    with pytest.raises(RemoteAccessError):
        inline.post_send(x.qp, wr)
    assert engine.queued_wr_ids(x.qp, QueueKind.SEND) == []


def test_bad_lkey_is_a_local_error():
    engine = make_engine()
    x, _ = pair(engine)
    wr = WorkRequest(6, Opcode.SEND, (ScatterGather(0, 2, x.mr.lkey ^ 0xFF),))
    with pytest.raises(LocalAccessError):
        inline.post_send(x.qp, wr)


def test_send_must_not_carry_rdma_fields():
    engine = make_engine()
    x, y = pair(engine)
    with pytest.raises(InvalidWorkRequest):
        inline.post_send(x.qp, send(1, x, 0, 2, remote_addr=0, rkey=y.mr.rkey))


def test_qp_state_machine_is_ordered():
    engine = make_engine()
    x = endpoint(engine, A)
    y = endpoint(engine, B)
    with pytest.raises(InvalidTransition):
        engine.modify_qp(x.qp, Transition.to_rts())
    with pytest.raises(InvalidQpState):
        inline.post_send(x.qp, send(1, x, 0, 1))
    with pytest.raises(InvalidQpState):
        inline.post_recv(x.qp, recv(1, x, 0, 1))
    engine.modify_qp(x.qp, Transition.to_init())
    inline.post_recv(x.qp, recv(1, x, 0, 1))
    with pytest.raises(RemoteUnknown):
        engine.modify_qp(x.qp, Transition.to_rtr(y.ctx.lid, y.qp.qp_num + 99))
    engine.modify_qp(x.qp, Transition.to_rtr(y.ctx.lid, y.qp.qp_num))
    assert engine.query_qp(x.qp).state == QpState.RTR
    assert engine.query_qp(x.qp).remote_qp_num == y.qp.qp_num


def test_send_queue_depth_is_enforced():
    engine = make_engine()
    x, _ = pair(engine, max_wr=2)
    inline.post_send(x.qp, send(1, x, 0, 1))
    inline.post_send(x.qp, send(2, x, 0, 1))
    with pytest.raises(QueueFull):
        inline.post_send(x.qp, send(3, x, 0, 1))


def test_cq_overrun_drops_and_raises_async_event():
    engine = make_engine()
    x, y = pair(engine, cq_capacity=1)
    for i in range(2):
        inline.post_recv(y.qp, recv(10 + i, y, 100 * i, 8))
    inline.post_send(x.qp, send(1, x, 0, 1, signaled=False))
    inline.post_send(x.qp, send(2, x, 0, 1, signaled=False))
    engine.progress(10)
    assert [e.wr_id for e in inline.poll_cq(y.cq, 4)] == [10]
    assert (CQ_OVERRUN, y.cq.handle) in engine.async_events


def test_srq_feeds_receives_and_fires_limit_once():
    engine = make_engine()
    x, y = pair(engine, srq=True)
    engine.modify_srq(y.srq, 2)
    for i in range(3):
        inline.post_srq_recv(y.srq, recv(20 + i, y, 64 * i, 16))
    with pytest.raises(InvalidQpState):
        inline.post_recv(y.qp, recv(1, y, 0, 1))
    for i in range(2):
        inline.post_send(x.qp, send(i, x, 0, 4))
    engine.progress(10)
    assert [e.wr_id for e in inline.poll_cq(y.cq, 4)] == [20, 21]
    assert engine.queued_wr_ids(y.srq, QueueKind.SRQ) == [22]
    assert engine.async_events.count((SRQ_LIMIT_REACHED, y.srq.handle)) == 1


def test_destroyed_handles_are_stale():
    engine = make_engine()
    x = endpoint(engine, A)
    engine.destroy(x.qp)
    with pytest.raises(StaleHandle):
        engine.query_qp(x.qp)
    with pytest.raises(StaleHandle):
        inline.post_send(x.qp, send(1, x, 0, 1))


def test_region_and_device_bounds():
    engine = make_engine()
    x = endpoint(engine, A)
    with pytest.raises(InvalidRange):
        engine.reg_mr(x.pd, 1 << 16, 1, ALL)
    with pytest.raises(AddressUnknown):
        engine.open_device(NodeAddr(5, 0))


def test_epochs_never_reuse_keys():
    first = make_engine(epoch=1)
    second = make_engine(epoch=2)
    a1, _ = pair(first)
    a2, _ = pair(second)
    assert epoch_tag(1) != epoch_tag(2)
    assert a1.qp.qp_num != a2.qp.qp_num
    assert a1.mr.rkey != a2.mr.rkey
    assert a1.mr.lkey != a2.mr.lkey
    assert first.query_port(a1.ctx).lid != second.query_port(a2.ctx).lid


def test_snapshot_reports_queues_and_in_flight():
    engine = make_engine(delivery_delay_ticks=5)
    x, y = pair(engine)
    inline.post_recv(y.qp, recv(7, y, 0, 8))
    inline.post_send(x.qp, send(1, x, 0, 1))
    snap = engine.snapshot()
    [qx] = snap[A].qps
    [qy] = snap[B].qps
    assert qx.send_wr_ids == [1]
    assert qy.recv_wr_ids == [7]
    assert snap[A].in_flight == 1
    assert qx.remote == (y.ctx.lid, y.qp.qp_num)
