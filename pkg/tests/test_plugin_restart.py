"""Restart from images: replay, id exchange, repost."""

import asyncio

import pytest

from ibcr.adapters.coordinator import Coordinator
from ibcr.adapters.plugin import CrPlugin
from ibcr.adapters.verbs import VerbsEngine
from ibcr.adapters.verbs import inline
from ibcr.adapters.verbs.engine import epoch_tag
from ibcr.domain.errors import RestartDirectoryIncomplete
from ibcr.domain.errors import VirtualIdConflict
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from tests.plugin_pair import ADDRS
from tests.plugin_pair import MEMORY
from tests.plugin_pair import hub_for
from tests.plugin_pair import make_fabric
from tests.plugin_pair import restart
from tests.plugin_pair import snapshot
from tests.plugin_pair import wire


@pytest.mark.parametrize("policy", list(IdPolicy))
async def test_restart_keeps_virtual_ids_and_reposts(policy):
    before = await wire(policy)
    x, y = before.ranks
    inline.post_recv(y.qp, y.recv(7))
    inline.post_recv(y.qp, y.recv(8, addr=2048))
    x.plugin.write_memory(x.ctx, 0, b"payload!")
    inline.post_send(x.qp, x.send(1))
    before.engine.progress(10)
    for r in before.ranks:
        r.plugin.drain_round()

    after = await restart([snapshot(x), snapshot(y)])
    nx, ny = after.ranks
    assert (nx.qp.qp_num, ny.qp.qp_num) == (x.qp.qp_num, y.qp.qp_num)
    assert nx.qp.real_ref.qp_num != x.qp.real_ref.qp_num
    assert nx.mr.rkey == x.mr.rkey
    assert ny.plugin.query_qp(ny.qp).remote_qp_num == x.qp.qp_num
    assert ny.plugin.pending_reposts() == 1
    assert nx.plugin.pending_reposts() == 0
    assert ny.plugin.read_memory(ny.ctx, 1024, 8) == b"payload!"

    # completions drained before the checkpoint come out first
    [old] = inline.poll_cq(ny.cq, 4)
    assert (old.wr_id, old.qp_num) == (7, y.qp.qp_num)
    assert [e.wr_id for e in inline.poll_cq(nx.cq, 4)] == [1]

    nx.plugin.write_memory(nx.ctx, 0, b"again!!!")
    inline.post_send(nx.qp, nx.send(2))
    after.engine.progress(10)
    [new] = inline.poll_cq(ny.cq, 4)
    assert (new.wr_id, new.qp_num) == (8, y.qp.qp_num)
    assert ny.plugin.read_memory(ny.ctx, 2048, 8) == b"again!!!"
    assert ny.plugin.pending_reposts() == 0


async def test_inline_payload_is_captured_at_post():
    before = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL, delivery_delay_ticks=1000)
    x, y = before.ranks
    inline.post_recv(y.qp, y.recv(7))
    x.plugin.write_memory(x.ctx, 0, b"original")
    inline.post_send(x.qp, x.send(1, inline_flag=True))
    x.plugin.write_memory(x.ctx, 0, b"changed!")
    assert before.fabric.in_flight() == 1

    after = await restart([snapshot(x), snapshot(y)])
    nx, ny = after.ranks
    assert nx.plugin.wqes.entries(QueueKind.SEND)[0].inline_payload == b"original"
    after.engine.progress(10)
    assert [e.wr_id for e in inline.poll_cq(ny.cq, 4)] == [7]
    assert ny.plugin.read_memory(ny.ctx, 1024, 8) == b"original"
    assert [e.wr_id for e in inline.poll_cq(nx.cq, 4)] == [1]
    assert nx.plugin.pending_reposts() == 0


async def test_publish_after_restart_strides_new_ids():
    before = await wire(IdPolicy.PUBLISH_AFTER_RESTART)
    old = {r.qp.qp_num for r in before.ranks}
    after = await restart([snapshot(r) for r in before.ranks])
    fresh = [r.plugin.create_qp(r.pd, r.cq, r.cq).qp_num for r in after.ranks]
    assert fresh[0] != fresh[1]
    assert min(fresh) > max(old)
    assert fresh[1] - fresh[0] == 1


@pytest.mark.parametrize(
    ("policy", "conflicts"),
    [
        (IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE, True),
        (IdPolicy.GLOBALLY_UNIQUE_VIRTUAL, False),
        (IdPolicy.PUBLISH_AFTER_RESTART, False),
    ],
)
async def test_reused_real_ids_collide_only_without_virtualization(policy, conflicts):
    before = await wire(policy)
    images = [snapshot(r) for r in before.ranks]
    # the recreated queue pairs take the two ids before the wrap; the next one
    # gets the real qp_num rank 0 had in the first epoch
    after = await restart(images, id_tag=epoch_tag(1), id_offset=0x100000 - 2)
    x = after.ranks[0]
    if conflicts:
        with pytest.raises(VirtualIdConflict):
            x.plugin.create_qp(x.pd, x.cq, x.cq)
        assert len(x.plugin.shadows(ResourceKind.QP)) == 1
    else:
        qp = x.plugin.create_qp(x.pd, x.cq, x.cq)
        assert qp.qp_num not in {r.qp.qp_num for r in before.ranks}


async def test_restart_without_every_peer_is_refused():
    before = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    with pytest.raises(RestartDirectoryIncomplete):
        await restart([snapshot(before.ranks[1])])


class LockCheckingSession:
    """Forwards to ``inner``; at the barrier, checks another thread can take ``lock``."""

    def __init__(self, inner, lock):
        self.inner = inner
        self.client_id = inner.client_id
        self.lock = lock
        self.free_at_barrier: bool | None = None

    async def publish(self, namespace: str, key: bytes, value: bytes) -> None:
        await self.inner.publish(namespace, key, value)

    async def subscribe(self, namespace: str) -> dict[bytes, bytes]:
        return await self.inner.subscribe(namespace)

    async def barrier(self) -> int:
        def grab() -> bool:
            if not self.lock.acquire(timeout=1):
                return False
            self.lock.release()
            return True

        self.free_at_barrier = await asyncio.to_thread(grab)
        return await self.inner.barrier()


async def test_plugin_lock_is_free_while_waiting_for_peers():
    before = await wire(IdPolicy.GLOBALLY_UNIQUE_VIRTUAL)
    images = [snapshot(r) for r in before.ranks]
    engine = VerbsEngine(make_fabric(), epoch=2, memory_bytes=MEMORY)
    coordinator = Coordinator()
    coordinator.begin_epoch(len(images))
    hub = hub_for(coordinator)
    plugins = [CrPlugin(engine) for _ in images]
    sessions = [LockCheckingSession(hub.register(i.rank), p._lock) for i, p in zip(images, plugins, strict=True)]
    reports = await asyncio.gather(*(
        p.on_restart(i, ADDRS[i.rank], s) for p, i, s in zip(plugins, images, sessions, strict=True)
    ))
    assert [s.free_at_barrier for s in sessions] == [True, True]
    assert all(r.directory_entries > 0 for r in reports)
