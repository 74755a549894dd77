"""Reliable-connection transport between simulated endpoints.

Virtual time is an integer tick advanced by the caller. Every frame is
scheduled on one heap keyed by (due tick, send order); a frame is never due
before an earlier frame in the same connection direction, so delivery is
in-order and exactly-once whatever the delay, skew or jitter.
"""

import heapq
import itertools
import logging
import random
from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import replace

from ibcr.adapters.fabric.stream import StreamLink
from ibcr.domain.errors import AddressUnknown
from ibcr.domain.errors import FabricError
from ibcr.domain.errors import RebindWhileActive
from ibcr.domain.errors import SelfConnectRejected
from ibcr.domain.errors import SendSuppressed
from ibcr.domain.models import FabricConfig
from ibcr.domain.models import Frame
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import TransportMode
from ibcr.hash import payload_hash


logger = logging.getLogger(__name__)

FrameHandler = Callable[[Frame, NodeAddr, NodeAddr], None]


@dataclass
class Connection:
    conn_id: int
    a: NodeAddr
    b: NodeAddr
    mode: TransportMode
    link: StreamLink | None = None

    def peer(self, addr: NodeAddr) -> NodeAddr:
        if addr == self.a:
            return self.b
        if addr == self.b:
            return self.a
        raise FabricError(f"{addr} is not an end of connection {self.conn_id}")


class Fabric:
    def __init__(self, config: FabricConfig | None = None):
        self.config = config or FabricConfig()
        self.now = 0
        self.connections_opened = 0
        self.delivery_log: list[tuple[int, int, int, int, str]] = []
        self._rng = random.Random(self.config.rng_seed)
        self._endpoints: set[NodeAddr] = set()
        self._modes: dict[NodeAddr, TransportMode] = {}
        self._handlers: dict[NodeAddr, FrameHandler] = {}
        self._conns: dict[int, Connection] = {}
        self._queue: list[tuple[int, int, int, NodeAddr, NodeAddr, Frame]] = []
        self._order = itertools.count()
        self._next_seq: dict[tuple[int, NodeAddr], int] = {}
        self._last_due: dict[tuple[int, NodeAddr], int] = {}
        self._expected: dict[tuple[int, NodeAddr], int] = {}
        self._quiesced: set[NodeAddr] = set()

    # endpoints

    def register(self, addr: NodeAddr) -> None:
        if addr.port_index >= self.config.port_count:
            raise FabricError(
                f"port {addr.port_index} outside the {self.config.port_count} configured ports"
            )
        self._endpoints.add(addr)

    def has_endpoint(self, addr: NodeAddr) -> bool:
        return addr in self._endpoints

    def mode_of(self, addr: NodeAddr) -> TransportMode:
        return self._modes.get(addr, self.config.mode)

    def attach(self, addr: NodeAddr, handler: FrameHandler) -> None:
        if addr not in self._endpoints:
            raise AddressUnknown(f"endpoint {addr} is not registered")
        self._handlers[addr] = handler

    def detach(self, addr: NodeAddr) -> None:
        self._handlers.pop(addr, None)

    # connections

    def connect(self, a: NodeAddr, b: NodeAddr) -> int:
        for addr in (a, b):
            if addr not in self._endpoints:
                raise AddressUnknown(f"endpoint {addr} is not registered")
        if a == b:
            raise SelfConnectRejected(f"connection from {a} to itself")
        stream = TransportMode.STREAM in (self.mode_of(a), self.mode_of(b))
        mode = TransportMode.STREAM if stream else TransportMode.IN_PROCESS
        self.connections_opened += 1
        conn_id = self.connections_opened
        self._conns[conn_id] = Connection(
            conn_id, a, b, mode, StreamLink(a, b) if stream else None
        )
        logger.debug("conn %d %s <-> %s (%s)", conn_id, a, b, mode)
        return conn_id

    def live_connections(self, addr: NodeAddr) -> list[int]:
        return [cid for cid, c in self._conns.items() if addr in (c.a, c.b)]

    def connection(self, conn_id: int) -> Connection:
        try:
            return self._conns[conn_id]
        except KeyError:
            raise FabricError(f"unknown connection {conn_id}") from None

    # traffic

    def send(
        self,
        conn_id: int,
        src: NodeAddr,
        frame: Frame,
        *,
        delay: int | None = None,
        app_originated: bool = True,
    ) -> int:
        """Schedule ``frame`` from ``src``; return the sequence number it was given.

        A quiesced endpoint still emits engine-originated frames (delivery
        acks, read responses) so in-flight work can complete.
        """
        conn = self.connection(conn_id)
        dst = conn.peer(src)
        if app_originated and src in self._quiesced:
            raise SendSuppressed(f"{src} is quiesced")
        key = (conn_id, src)
        seq = self._next_seq.get(key, 1)
        self._next_seq[key] = seq + 1
        frame = replace(frame, conn_id=conn_id, seq=seq)
        ticks = self.config.delivery_delay_ticks if delay is None else delay
        if self.config.delivery_jitter_ticks:
            ticks += self._rng.randint(0, self.config.delivery_jitter_ticks)
        due = max(self.now + ticks, self._last_due.get(key, 0))
        self._last_due[key] = due
        if conn.link is not None:
            conn.link.send(src, frame)
        heapq.heappush(self._queue, (due, next(self._order), conn_id, src, dst, frame))
        return seq

    def advance(self, ticks: int) -> int:
        """Move virtual time forward, delivering every frame that falls due.

        Returns the number of frames delivered.
        """
        if ticks < 0:
            raise ValueError("ticks must be non-negative")
        if ticks == 0:
            return 0
        target = self.now + ticks
        delivered = 0
        while self._queue and self._queue[0][0] <= target:
            due, _, conn_id, src, dst, frame = heapq.heappop(self._queue)
            self.now = max(self.now, due)
            self._deliver(conn_id, src, dst, frame)
            delivered += 1
        self.now = target
        return delivered

    def next_due(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def in_flight(self, addr: NodeAddr | None = None) -> int:
        if addr is None:
            return len(self._queue)
        return sum(1 for _, _, _, src, dst, _ in self._queue if addr in (src, dst))

    def in_flight_frames(self) -> list[tuple[int, NodeAddr, NodeAddr, Frame]]:
        return [(due, src, dst, frame) for due, _, _, src, dst, frame in sorted(self._queue)]

    # checkpoint support

    def quiesce(self, addr: NodeAddr) -> int:
        if addr not in self._quiesced:
            logger.info("quiesce %s", addr)
        self._quiesced.add(addr)
        return self.in_flight(addr)

    def unquiesce(self, addr: NodeAddr) -> None:
        self._quiesced.discard(addr)

    def is_quiesced(self, addr: NodeAddr) -> bool:
        return addr in self._quiesced

    def discard(self, addr: NodeAddr) -> int:
        """Drop every connection of ``addr`` and whatever they had in flight."""
        doomed = set(self.live_connections(addr))
        before = len(self._queue)
        self._queue = [entry for entry in self._queue if entry[2] not in doomed]
        heapq.heapify(self._queue)
        for conn_id in doomed:
            conn = self._conns.pop(conn_id)
            if conn.link is not None:
                conn.link.close()
        for table in (self._next_seq, self._last_due, self._expected):
            for key in [k for k in table if k[0] in doomed]:
                del table[key]
        self._quiesced.discard(addr)
        self.detach(addr)
        dropped = before - len(self._queue)
        logger.info("discarded %s: %d connections, %d frames", addr, len(doomed), dropped)
        return dropped

    def teardown_and_rebind(self, addr: NodeAddr, new_mode: TransportMode) -> None:
        if self.live_connections(addr):
            raise RebindWhileActive(f"{addr} still has live connections")
        self._modes[addr] = TransportMode(new_mode)
        logger.info("rebind %s to %s", addr, new_mode)

    def close(self) -> None:
        for conn in self._conns.values():
            if conn.link is not None:
                conn.link.close()
        self._conns.clear()
        self._queue.clear()

    def _deliver(self, conn_id: int, src: NodeAddr, dst: NodeAddr, frame: Frame) -> None:
        conn = self._conns[conn_id]
        if conn.link is not None:
            frame = conn.link.receive(dst)
        key = (conn_id, src)
        expected = self._expected.get(key, 1)
        if frame.seq != expected:
            raise FabricError(f"conn {conn_id}: got seq {frame.seq}, expected {expected}")
        self._expected[key] = expected + 1
        self.delivery_log.append(
            (self.now, conn_id, frame.seq, int(frame.kind), payload_hash(frame.payload))
        )
        handler = self._handlers.get(dst)
        if handler is None:
            logger.warning("no handler at %s, dropping frame %d/%d", dst, conn_id, frame.seq)
            return
        handler(frame, src, dst)
