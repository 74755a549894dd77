"""The coordinator protocol over TCP."""

import asyncio

import pytest

from ibcr.adapters.coordinator import Coordinator
from ibcr.adapters.coordinator import CoordinatorClient
from ibcr.adapters.coordinator import CoordinatorServer
from ibcr.adapters.coordinator.server import split_address
from ibcr.domain.errors import DuplicateNode
from ibcr.domain.errors import PublishConflict
from ibcr.domain.models import Namespace
from ibcr.domain.models import Phase


@pytest.fixture
async def server():
    srv = CoordinatorServer(Coordinator(), timeout=5)
    host, port = await srv.start("127.0.0.1", 0)
    srv.address = f"{host}:{port}"
    yield srv
    await srv.close()


def test_split_address():
    assert split_address("127.0.0.1:7777") == ("127.0.0.1", 7777)
    assert split_address("[::1]:80")[1] == 80


async def test_register_publish_barrier_subscribe(server):
    clients = [await CoordinatorClient.connect(server.address) for _ in range(2)]
    try:
        ids = [await c.register(node) for node, c in enumerate(clients)]
        assert ids == [1, 2]
        ns = str(Namespace.VRKEY_PD_RKEY)
        await clients[0].publish(ns, b"\x00\x01", b"\xff")
        await clients[1].publish(ns, b"\x00\x02", b"")
        assert await asyncio.gather(*(c.barrier() for c in clients)) == [1, 1]
        assert await clients[1].subscribe(ns) == {b"\x00\x01": b"\xff", b"\x00\x02": b""}
    finally:
        for c in clients:
            await c.close()


async def test_errors_come_back_typed(server):
    a = await CoordinatorClient.connect(server.address)
    b = await CoordinatorClient.connect(server.address)
    try:
        await a.register(0)
        with pytest.raises(DuplicateNode):
            await b.register(0)
        await b.register(1)
        await a.publish(str(Namespace.LID), b"k", b"1")
        with pytest.raises(PublishConflict):
            await b.publish(str(Namespace.LID), b"k", b"2")
        # the connection survives a failed request
        await b.phase_ack(Phase.QUIESCED)
        assert server.coordinator.client(b.client_id).phase == Phase.QUIESCED
    finally:
        await a.close()
        await b.close()


async def test_control_messages(server):
    ctl = await CoordinatorClient.connect(server.address)
    try:
        await ctl.register(0)
        assert await ctl.ctrl_checkpoint() == [1]
        assert await ctl.ctrl_restart(3) == 2
        assert server.coordinator.expected == 3
        client_id = await ctl.register(4)
        assert server.coordinator.client(client_id).phase == Phase.RESTART_WAIT
    finally:
        await ctl.close()
