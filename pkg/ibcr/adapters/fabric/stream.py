"""Frame wire codec and the loopback socket link used by STREAM connections.

Record layout (little-endian): magic 0xF1, kind u8, conn_id u64, seq u64,
imm_present u8, imm u32, remote_addr u64, rkey u32, payload_len u32, payload.
Each record is preceded by a big-endian u32 length.
"""

import logging
import selectors
import socket
import struct
import time

from ibcr.domain.errors import FabricError
from ibcr.domain.models import Frame
from ibcr.domain.models import FrameKind
from ibcr.domain.models import NodeAddr


logger = logging.getLogger(__name__)

MAGIC = 0xF1
RECORD = struct.Struct("<BBQQBIQII")
LENGTH = struct.Struct(">I")

# Kinds whose remote_addr/rkey fields are meaningful on the wire.
_ADDRESSED = frozenset({FrameKind.RDMA_WRITE_DATA, FrameKind.RDMA_READ_REQ})


def encode_frame(frame: Frame) -> bytes:
    return (
        RECORD.pack(
            MAGIC,
            int(frame.kind),
            frame.conn_id,
            frame.seq,
            frame.imm is not None,
            frame.imm or 0,
            frame.remote_addr or 0,
            frame.rkey or 0,
            len(frame.payload),
        )
        + frame.payload
    )


def decode_frame(record: bytes) -> Frame:
    if len(record) < RECORD.size:
        raise FabricError(f"short frame record ({len(record)} bytes)")
    magic, kind, conn_id, seq, imm_present, imm, remote_addr, rkey, length = RECORD.unpack_from(record)
    if magic != MAGIC:
        raise FabricError(f"bad frame magic {magic:#x}")
    payload = record[RECORD.size :]
    if len(payload) != length:
        raise FabricError(f"payload length {len(payload)} != declared {length}")
    kind = FrameKind(kind)
    addressed = kind in _ADDRESSED
    return Frame(
        conn_id=conn_id,
        seq=seq,
        kind=kind,
        payload=payload,
        imm=imm if imm_present else None,
        remote_addr=remote_addr if addressed else None,
        rkey=rkey if addressed else None,
    )


def encode_record(frame: Frame) -> bytes:
    body = encode_frame(frame)
    return LENGTH.pack(len(body)) + body


class StreamLink:
    """One TCP loopback connection between two endpoints.

    Both ends live in this process, so reads and writes are interleaved on
    non-blocking sockets; a large backlog in one direction can never wedge
    the other.
    """

    def __init__(self, a: NodeAddr, b: NodeAddr, timeout: float = 5.0):
        self.timeout = timeout
        with socket.create_server(("127.0.0.1", 0)) as listener:
            client = socket.create_connection(listener.getsockname())
            server, _ = listener.accept()
        self._socks = {a: client, b: server}
        self._outbox = {a: bytearray(), b: bytearray()}
        self._inbox = {a: bytearray(), b: bytearray()}
        self._selector = selectors.DefaultSelector()
        for addr, sock in self._socks.items():
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._selector.register(sock, selectors.EVENT_READ, data=addr)
        logger.debug("stream link %s <-> %s on %s", a, b, client.getsockname())

    def send(self, src: NodeAddr, frame: Frame) -> None:
        self._outbox[src] += encode_record(frame)
        self._pump()

    def receive(self, dst: NodeAddr) -> Frame:
        deadline = time.monotonic() + self.timeout
        while (frame := self._pop(dst)) is None:
            if self._pump():
                continue
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise FabricError(f"stream link to {dst} stalled")
            self._wait(remaining)
        return frame

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                self._selector.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()
        self._selector.close()

    def _pop(self, dst: NodeAddr) -> Frame | None:
        buf = self._inbox[dst]
        if len(buf) < LENGTH.size:
            return None
        (length,) = LENGTH.unpack_from(buf)
        end = LENGTH.size + length
        if len(buf) < end:
            return None
        record = bytes(buf[LENGTH.size : end])
        del buf[:end]
        return decode_frame(record)

    def _pump(self) -> bool:
        progress = False
        for addr, sock in self._socks.items():
            out = self._outbox[addr]
            if out:
                try:
                    sent = sock.send(out)
                except BlockingIOError:
                    sent = 0
                if sent:
                    del out[:sent]
                    progress = True
            try:
                data = sock.recv(1 << 16)
            except BlockingIOError:
                continue
            if not data:
                raise FabricError(f"stream link closed under {addr}")
            self._inbox[addr] += data
            progress = True
        return progress

    def _wait(self, timeout: float) -> None:
        for addr, sock in self._socks.items():
            events = selectors.EVENT_READ
            if self._outbox[addr]:
                events |= selectors.EVENT_WRITE
            self._selector.modify(sock, events, data=addr)
        self._selector.select(timeout)
