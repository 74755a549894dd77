"""The interposition layer while the application runs."""

import pytest

from ibcr.adapters.plugin import CrPlugin
from ibcr.adapters.plugin.plugin import LAYER
from ibcr.adapters.plugin.plugin import delivered_counts
from ibcr.adapters.plugin.plugin import unresolved_pairs
from ibcr.adapters.verbs import inline
from ibcr.adapters.verbs.inline import install_identity_wrappers
from ibcr.domain.errors import LocalAccessError
from ibcr.domain.errors import StaleHandle
from ibcr.domain.errors import UnknownRemoteVirtualId
from ibcr.domain.errors import UnknownVrkey
from ibcr.domain.models import IdClass
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import Opcode
from ibcr.domain.models import QpState
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import ScatterGather
from ibcr.domain.models import Transition
from ibcr.domain.models import WcStatus
from ibcr.domain.models import WorkRequest
from ibcr.domain.settings import PluginSettings
from tests.plugin_pair import ADDRS
from tests.plugin_pair import wire


async def test_globally_unique_ids_differ_from_real_ones():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    assert x.qp.qp_num != x.qp.real_ref.qp_num
    assert x.mr.rkey != x.mr.real_ref.rkey
    assert x.plugin.query_port(x.ctx).lid == 0x100
    assert y.plugin.query_port(y.ctx).lid == 0x200
    assert x.qp.qp_num >> 24 == 0
    assert y.qp.qp_num >> 24 == 1
    attrs = x.plugin.query_qp(x.qp)
    assert (attrs.state, attrs.remote_qp_num) == (QpState.RTS, y.qp.qp_num)


async def test_real_equals_virtual_at_create():
    pair = await wire(IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE)
    x, _ = pair.ranks
    assert x.qp.qp_num == x.qp.real_ref.qp_num
    assert x.mr.lkey == x.mr.real_ref.lkey
    assert x.plugin.query_port(x.ctx).lid == x.ctx.real_ref.lid


@pytest.mark.parametrize("policy", list(IdPolicy))
async def test_send_recv_through_virtual_ids(policy):
    pair = await wire(policy)
    x, y = pair.ranks
    inline.post_recv(y.qp, y.recv(7))
    assert y.plugin.wqes.wr_ids(QueueKind.RECV, y.qp.virtual_id) == [7]
    x.plugin.write_memory(x.ctx, 0, b"payload!")
    inline.post_send(x.qp, x.send(1))
    pair.engine.progress(10)

    [got] = inline.poll_cq(y.cq, 4)
    assert (got.wr_id, got.status, got.qp_num) == (7, WcStatus.SUCCESS, y.qp.qp_num)
    assert y.plugin.read_memory(y.ctx, 1024, 8) == b"payload!"
    [done] = inline.poll_cq(x.cq, 4)
    assert done.qp_num == x.qp.qp_num
    assert len(x.plugin.wqes) == len(y.plugin.wqes) == 0


async def test_rdma_write_translates_the_virtual_rkey():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    x.plugin.write_memory(x.ctx, 0, b"abc")
    wr = WorkRequest(
        2, Opcode.RDMA_WRITE, (ScatterGather(0, 3, x.mr.lkey),), remote_addr=2000, rkey=y.mr.rkey,
    )
    inline.post_send(x.qp, wr)
    pair.engine.progress(10)
    assert y.plugin.read_memory(y.ctx, 2000, 3) == b"abc"
    bad = WorkRequest(3, Opcode.RDMA_WRITE, (ScatterGather(0, 3, x.mr.lkey),), remote_addr=0, rkey=0x7777)
    with pytest.raises(UnknownVrkey):
        inline.post_send(x.qp, bad)


async def test_unsignaled_sends_retire_with_the_next_signaled_one():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    for i in range(3):
        inline.post_recv(y.qp, y.recv(10 + i, addr=64 * i, length=16))
    inline.post_send(x.qp, x.send(1, signaled=False))
    inline.post_send(x.qp, x.send(2, signaled=False))
    assert x.plugin.wqes.wr_ids(QueueKind.SEND, x.qp.virtual_id) == [1, 2]
    inline.post_send(x.qp, x.send(3))
    pair.engine.progress(10)
    assert [e.wr_id for e in inline.poll_cq(x.cq, 4)] == [3]
    assert x.plugin.wqes.wr_ids(QueueKind.SEND, x.qp.virtual_id) == []
    assert [e.wr_id for e in inline.poll_cq(y.cq, 4)] == [10, 11, 12]


async def test_delivered_unsignaled_sends_are_retired_at_drain():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    for i in range(3):
        inline.post_recv(y.qp, y.recv(10 + i, addr=64 * i, length=16))
    inline.post_send(x.qp, x.send(1, signaled=False))
    inline.post_send(x.qp, x.send(2, signaled=False))
    pair.engine.progress(10)
    rounds = [x.plugin.drain_round(), y.plugin.drain_round()]
    assert unresolved_pairs(rounds) == 2
    delivered = delivered_counts(rounds)
    assert y.plugin.retire_delivered(delivered) == 0
    assert x.plugin.retire_delivered(delivered) == 2
    assert x.plugin.wqes.entries(QueueKind.SEND) == []
    assert unresolved_pairs([x.plugin.drain_round(), y.plugin.drain_round()]) == 0


async def test_retiring_stops_at_a_signaled_send_still_owed_a_completion():
    pair = await wire(IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE, completion_skew_ticks=1000)
    x, y = pair.ranks
    for i in range(2):
        inline.post_recv(y.qp, y.recv(10 + i, addr=64 * i, length=16))
    inline.post_send(x.qp, x.send(1))
    inline.post_send(x.qp, x.send(2, signaled=False))
    pair.engine.progress(10)
    rounds = [x.plugin.drain_round(), y.plugin.drain_round()]
    assert x.plugin.retire_delivered(delivered_counts(rounds)) == 0
    assert x.plugin.wqes.wr_ids(QueueKind.SEND, x.qp.virtual_id) == [1, 2]


async def test_remote_ids_must_be_published_first():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, _ = pair.ranks
    plugin = CrPlugin(pair.engine, rank=2, n_ranks=3, settings=PluginSettings(id_policy="globally_unique"))
    # same endpoint as rank 0, a second process on the host
    ctx = plugin.open_device(ADDRS[0])
    pd = plugin.alloc_pd(ctx)
    cq = plugin.create_cq(ctx, 4)
    qp = plugin.create_qp(pd, cq, cq)
    plugin.modify_qp(qp, Transition.to_init())
    with pytest.raises(UnknownRemoteVirtualId):
        plugin.modify_qp(qp, Transition.to_rtr(0x100, x.qp.qp_num))


async def test_engine_errors_carry_virtual_ids():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, _ = pair.ranks
    wr = WorkRequest(4, Opcode.SEND, (ScatterGather(0, 8, 0x4242),))
    with pytest.raises(LocalAccessError) as info:
        inline.post_send(x.qp, wr)
    assert info.value.subject == x.qp.virtual_id
    assert x.plugin.wqes.wr_ids(QueueKind.SEND, x.qp.virtual_id) == []


async def test_destroy_forgets_everything():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    inline.post_recv(y.qp, y.recv(7))
    vqpn = y.qp.qp_num
    y.plugin.destroy(y.qp)
    assert y.plugin.wqes.entries() == []
    assert vqpn not in y.plugin.table[IdClass.QP_NUM]
    gone = (ResourceKind.QP, y.qp.virtual_id)
    assert all((r.kind, r.virtual_id) != gone for r in y.plugin.resources.creations)
    # other kinds may share the numeric handle and must survive
    assert {r.kind for r in y.plugin.resources.creations} == {
        ResourceKind.CTX, ResourceKind.PD, ResourceKind.MR, ResourceKind.CQ,
    }
    with pytest.raises(StaleHandle):
        inline.post_recv(y.qp, y.recv(8))
    with pytest.raises(StaleHandle):
        y.plugin.resolve(y.qp.kind, y.qp.virtual_id)


async def test_layers_stack_on_the_dispatch_table():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    install_identity_wrappers(y.ctx)
    assert y.ctx.dispatch.layers == [LAYER, "identity"]
    inline.post_recv(y.qp, y.recv(7))
    inline.post_send(x.qp, x.send(1))
    pair.engine.progress(10)
    [got] = inline.poll_cq(y.cq, 4)
    assert got.qp_num == y.qp.qp_num
    assert y.plugin.wqes.entries() == []


async def test_drain_moves_completions_to_private_queues():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    for i in range(2):
        inline.post_recv(y.qp, y.recv(20 + i, addr=64 * i, length=16))
        inline.post_send(x.qp, x.send(i))
    pair.engine.progress(10)

    round_ = y.plugin.drain_round()
    assert round_.events == 2
    assert round_.recv_seen == {(y.qp.lid, y.qp.qp_num): 2}
    assert y.plugin.private_depth(y.cq) == 2
    assert [e.wr_id for e in y.plugin.drained_state().events] == [20, 21]
    assert x.plugin.drain_round().send_retired == {(y.qp.lid, y.qp.qp_num): 2}
    assert y.plugin.drain_round().events == 0

    assert [e.wr_id for e in inline.poll_cq(y.cq, 1)] == [20]
    assert [e.wr_id for e in inline.poll_cq(y.cq, 4)] == [21]
    assert y.plugin.private_depth(y.cq) == 0


async def test_on_checkpoint_drains_locally():
    pair = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    x, y = pair.ranks
    inline.post_recv(y.qp, y.recv(7))
    inline.post_send(x.qp, x.send(1))
    pair.engine.progress(1)
    report = y.plugin.on_checkpoint(pair.engine.progress)
    assert report.drained_events == 1
    assert report.rounds == 2
    assert report.wqes_outstanding == 0
