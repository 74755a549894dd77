"""Asyncio TCP front end for the coordinator, and the matching client."""

import asyncio
import logging

from ibcr.adapters.coordinator.session import InProcessHub
from ibcr.adapters.coordinator.state import Coordinator
from ibcr.adapters.coordinator.wire import ERROR
from ibcr.adapters.coordinator.wire import OK
from ibcr.adapters.coordinator.wire import BodyReader
from ibcr.adapters.coordinator.wire import MessageType
from ibcr.adapters.coordinator.wire import error_body
from ibcr.adapters.coordinator.wire import frame
from ibcr.adapters.coordinator.wire import pack_bytes
from ibcr.adapters.coordinator.wire import pack_str
from ibcr.adapters.coordinator.wire import pack_u32
from ibcr.adapters.coordinator.wire import raise_error
from ibcr.adapters.coordinator.wire import read_frame
from ibcr.domain.errors import CoordinatorError
from ibcr.domain.errors import IbcrError
from ibcr.domain.models import Phase


logger = logging.getLogger(__name__)


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


class CoordinatorServer:
    def __init__(self, coordinator: Coordinator | None = None, *, timeout: float | None = 30.0):
        self.coordinator = coordinator or Coordinator()
        self.hub = InProcessHub(self.coordinator, timeout)
        self._server: asyncio.Server | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._serve, host, port)
        bound = self._server.sockets[0].getsockname()[:2]
        logger.info("coordinator listening on %s:%d", *bound)
        return bound

    async def serve_forever(self) -> None:
        if self._server is None:
            raise CoordinatorError("server not started")
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    tag, body = await read_frame(reader)
                except asyncio.IncompleteReadError:
                    break
                try:
                    reply = await self._handle(MessageType(tag), BodyReader(body))
                    writer.write(frame(OK, reply))
                except (IbcrError, ValueError) as err:
                    logger.debug("request %s from %s failed: %s", tag, peer, err)
                    writer.write(frame(ERROR, error_body(err)))
                await writer.drain()
        finally:
            writer.close()

    async def _handle(self, tag: MessageType, body: BodyReader) -> bytes:
        c = self.coordinator
        match tag:
            case MessageType.REGISTER:
                node_id = body.u32()
                body.done()
                return pack_u32(c.register(node_id))
            case MessageType.CKPT_PHASE_ACK:
                client_id, phase = body.u32(), Phase(body.str())
                body.done()
                c.set_phase(client_id, phase)
                return b""
            case MessageType.PUBLISH:
                client_id, ns, key, value = body.u32(), body.str(), body.bytes(), body.bytes()
                body.done()
                c.publish(client_id, ns, key, value)
                return b""
            case MessageType.SUBSCRIBE:
                ns = body.str()
                body.done()
                entries = c.subscribe(ns)
                return pack_u32(len(entries)) + b"".join(
                    pack_bytes(k) + pack_bytes(v) for k, v in sorted(entries.items())
                )
            case MessageType.BARRIER:
                client_id = body.u32()
                body.done()
                return pack_u32(await self.hub.barrier(client_id))
            case MessageType.CTRL_CKPT:
                body.done()
                clients = c.close_registration()
                return pack_u32(len(clients)) + b"".join(pack_u32(cid) for cid in clients)
            case MessageType.CTRL_RESTART:
                expected = body.u32()
                body.done()
                return pack_u32(c.begin_epoch(expected))
        raise CoordinatorError(f"unhandled message type {tag}")


class CoordinatorClient:
    """One client connection; implements the coordinator session port."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer
        self._lock = asyncio.Lock()
        self.client_id = 0

    @classmethod
    async def connect(cls, address: str) -> "CoordinatorClient":
        host, port = split_address(address)
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer)

    async def close(self) -> None:
        self._writer.close()
        await self._writer.wait_closed()

    async def _call(self, tag: MessageType, body: bytes = b"") -> BodyReader:
        async with self._lock:
            self._writer.write(frame(tag, body))
            await self._writer.drain()
            status, reply = await read_frame(self._reader)
        if status != OK:
            raise_error(reply)
        return BodyReader(reply)

    async def register(self, node_id: int) -> int:
        self.client_id = (await self._call(MessageType.REGISTER, pack_u32(node_id))).u32()
        return self.client_id

    async def phase_ack(self, phase: Phase) -> None:
        await self._call(MessageType.CKPT_PHASE_ACK, pack_u32(self.client_id) + pack_str(str(phase)))

    async def publish(self, namespace: str, key: bytes, value: bytes) -> None:
        await self._call(
            MessageType.PUBLISH, pack_u32(self.client_id) + pack_str(namespace) + pack_bytes(key) + pack_bytes(value)
        )

    async def barrier(self) -> int:
        return (await self._call(MessageType.BARRIER, pack_u32(self.client_id))).u32()

    async def subscribe(self, namespace: str) -> dict[bytes, bytes]:
        reply = await self._call(MessageType.SUBSCRIBE, pack_str(namespace))
        return {reply.bytes(): reply.bytes() for _ in range(reply.u32())}

    async def ctrl_checkpoint(self) -> list[int]:
        reply = await self._call(MessageType.CTRL_CKPT)
        return [reply.u32() for _ in range(reply.u32())]

    async def ctrl_restart(self, expected: int) -> int:
        return (await self._call(MessageType.CTRL_RESTART, pack_u32(expected))).u32()
