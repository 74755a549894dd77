"""Simulated host channel adapter and verbs library.

One ``VerbsEngine`` instance is one epoch of real ids for every endpoint it
opens. Creation and control calls are methods; posts and polls are reached
through each context's ``DispatchTable`` (see ``ibcr.adapters.verbs.inline``).
"""

import itertools
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from dataclasses import field

from ibcr.adapters.fabric import Fabric
from ibcr.adapters.verbs.resources import CompletionQueue
from ibcr.adapters.verbs.resources import Context
from ibcr.adapters.verbs.resources import DispatchTable
from ibcr.adapters.verbs.resources import MemoryRegion
from ibcr.adapters.verbs.resources import ProtectionDomain
from ibcr.adapters.verbs.resources import QueuePair
from ibcr.adapters.verbs.resources import SharedReceiveQueue
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
from ibcr.domain.models import SEND_OPCODES
from ibcr.domain.models import AccessFlag
from ibcr.domain.models import AckStatus
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import Frame
from ibcr.domain.models import FrameKind
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Opcode
from ibcr.domain.models import PortAttributes
from ibcr.domain.models import QpAttributes
from ibcr.domain.models import QpState
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import Transition
from ibcr.domain.models import TransitionKind
from ibcr.domain.models import WcStatus
from ibcr.domain.models import WorkRequest


logger = logging.getLogger(__name__)

ACK = struct.Struct("<QB")
READ_RESP = struct.Struct("<Q")
READ_REQ = struct.Struct("<I")

CQ_OVERRUN = "CQ_OVERRUN"
SRQ_LIMIT_REACHED = "SRQ_LIMIT_REACHED"

_NEXT_STATE = {
    TransitionKind.TO_INIT: (QpState.RESET, QpState.INIT),
    TransitionKind.TO_RTR: (QpState.INIT, QpState.RTR),
    TransitionKind.TO_RTS: (QpState.RTR, QpState.RTS),
}


def epoch_tag(epoch: int) -> int:
    """12-bit nonce mixed into every key and qp number of an epoch."""
    return 0x800 | ((epoch * 0x25 + 0x13) & 0x7FF)


@dataclass
class QpSnapshot:
    handle: int
    qp_num: int
    state: QpState
    send_wr_ids: list[int]
    recv_wr_ids: list[int]
    remote: tuple[int, int] | None


@dataclass
class EndpointSnapshot:
    node: NodeAddr
    lid: int
    contexts: list[int] = field(default_factory=list)
    pds: list[int] = field(default_factory=list)
    mrs: list[int] = field(default_factory=list)
    cq_depths: dict[int, int] = field(default_factory=dict)
    qps: list[QpSnapshot] = field(default_factory=list)
    srqs: dict[int, list[int]] = field(default_factory=dict)
    in_flight: int = 0


class VerbsEngine:
    def __init__(
        self,
        fabric: Fabric,
        *,
        epoch: int = 1,
        memory_bytes: int = 4 << 20,
        cq_capacity: int = 256,
        id_tag: int | None = None,
        id_offset: int = 0,
    ):
        if epoch < 1:
            raise ValueError("epoch starts at 1")
        self.fabric = fabric
        self.epoch = epoch
        self.memory_bytes = memory_bytes
        self.cq_capacity = cq_capacity
        self.tag = epoch_tag(epoch) if id_tag is None else id_tag
        self.id_offset = id_offset
        self.async_events: list[tuple[str, int]] = []
        self._handle_counters: dict[ResourceKind, itertools.count] = {
            kind: itertools.count(1) for kind in ResourceKind
        }
        self._registry: dict[ResourceKind, dict[int, object]] = {kind: {} for kind in ResourceKind}
        self._qp_counter = itertools.count(1)
        self._pd_counters: dict[int, itertools.count] = defaultdict(lambda: itertools.count(1))
        self._lkey_counters: dict[NodeAddr, itertools.count] = defaultdict(lambda: itertools.count(1))
        self._memory: dict[NodeAddr, bytearray] = {}
        self._lkeys: dict[NodeAddr, dict[int, MemoryRegion]] = defaultdict(dict)
        self._pd_rkeys: dict[int, dict[int, MemoryRegion]] = defaultdict(dict)
        self._qps_by_num: dict[int, QueuePair] = {}
        self._pair_conn: dict[frozenset[int], int] = {}
        self._conn_qps: dict[int, dict[NodeAddr, QueuePair]] = defaultdict(dict)

    # ids

    def _handle(self, kind: ResourceKind) -> int:
        return ((self.epoch - 1) << 32) | next(self._handle_counters[kind])

    def _keyed(self, n: int) -> int:
        return (self.tag << 20) | (n & 0xFFFFF)

    def lid_of(self, node: NodeAddr) -> int:
        base = ((self.tag & 0x3F) + 1) << 8
        return (base + node.node_id * self.fabric.config.port_count + node.port_index) & 0xFFFF

    def _register(self, resource):
        self._registry[resource.kind][resource.handle] = resource
        return resource

    @staticmethod
    def _live(resource):
        if resource is None or not resource.live:
            handle = getattr(resource, "handle", None)
            raise StaleHandle("stale handle", handle)
        return resource

    def resolve(self, kind: ResourceKind, handle: int):
        return self._live(self._registry[ResourceKind(kind)].get(handle))

    # creation and control

    def open_device(self, node: NodeAddr) -> Context:
        if not self.fabric.has_endpoint(node):
            raise AddressUnknown(f"endpoint {node} is not registered")
        if node not in self._memory:
            self._memory[node] = bytearray(self.memory_bytes)
            self.fabric.attach(node, self._on_frame)
        dispatch = DispatchTable(
            post_send=self._post_send,
            post_recv=self._post_recv,
            post_srq_recv=self._post_srq_recv,
            poll_cq=self._poll_cq,
        )
        ctx = self._register(Context(self._handle(ResourceKind.CTX), node, self.lid_of(node), dispatch))
        logger.debug("open_device %s -> ctx %#x lid %#x", node, ctx.handle, ctx.lid)
        return ctx

    def alloc_pd(self, ctx: Context) -> ProtectionDomain:
        self._live(ctx)
        n = next(self._pd_counters[ctx.node.node_id])
        uid = (ctx.node.node_id << 32) | ((self.epoch - 1) << 20) | n
        return self._register(ProtectionDomain(self._handle(ResourceKind.PD), ctx, uid))

    def reg_mr(self, pd: ProtectionDomain, base_addr: int, length: int, access: AccessFlag) -> MemoryRegion:
        self._live(pd)
        if length <= 0 or base_addr < 0 or base_addr + length > self.memory_bytes:
            raise InvalidRange(f"region [{base_addr}, +{length}) outside node memory")
        node = pd.ctx.node
        lkey = self._keyed(next(self._lkey_counters[node]))
        rkey = self._keyed(pd.next_rkey)
        pd.next_rkey += 1
        mr = MemoryRegion(self._handle(ResourceKind.MR), pd, base_addr, length, lkey, rkey, AccessFlag(access))
        self._lkeys[node][lkey] = mr
        self._pd_rkeys[pd.handle][rkey] = mr
        return self._register(mr)

    def create_cq(self, ctx: Context, capacity: int | None = None) -> CompletionQueue:
        self._live(ctx)
        capacity = self.cq_capacity if capacity is None else capacity
        if capacity < 1:
            raise InvalidRange("cq capacity must be positive")
        return self._register(CompletionQueue(self._handle(ResourceKind.CQ), ctx, capacity))

    def create_srq(self, pd: ProtectionDomain, max_wr: int, limit: int = 0) -> SharedReceiveQueue:
        self._live(pd)
        if max_wr < 1 or not 0 <= limit <= max_wr:
            raise InvalidRange(f"srq max_wr={max_wr} limit={limit}")
        return self._register(SharedReceiveQueue(self._handle(ResourceKind.SRQ), pd, max_wr, limit))

    def create_qp(
        self,
        pd: ProtectionDomain,
        send_cq: CompletionQueue,
        recv_cq: CompletionQueue,
        srq: SharedReceiveQueue | None = None,
        max_send_wr: int = 64,
        max_recv_wr: int = 64,
    ) -> QueuePair:
        for resource in (pd, send_cq, recv_cq):
            self._live(resource)
        if srq is not None:
            self._live(srq)
        qp_num = self._keyed(self.id_offset + next(self._qp_counter))
        qp = QueuePair(
            self._handle(ResourceKind.QP),
            pd,
            send_cq,
            recv_cq,
            qp_num,
            srq=srq,
            max_send_wr=max_send_wr,
            max_recv_wr=max_recv_wr,
        )
        self._qps_by_num[qp_num] = qp
        logger.debug("create_qp %s qp_num %#x", pd.ctx.node, qp_num)
        return self._register(qp)

    def modify_qp(self, qp: QueuePair, transition: Transition) -> None:
        self._live(qp)
        required, target = _NEXT_STATE[transition.kind]
        if qp.state != required:
            raise InvalidTransition(f"{transition.kind} from {qp.state.name}", qp.qp_num)
        if transition.kind == TransitionKind.TO_RTR:
            self._bind(qp, transition.remote_lid, transition.remote_qp_num)
        qp.state = target

    def _bind(self, qp: QueuePair, remote_lid: int | None, remote_qp_num: int | None) -> None:
        remote = self._qps_by_num.get(remote_qp_num) if remote_qp_num is not None else None
        if remote is None or not remote.live or self.lid_of(remote.node) != remote_lid:
            raise RemoteUnknown("no queue pair at remote address", remote_qp_num)
        pair = frozenset({qp.qp_num, remote.qp_num})
        conn = self._pair_conn.get(pair)
        if conn is None:
            conn = self.fabric.connect(qp.node, remote.node)
            self._pair_conn[pair] = conn
            self._conn_qps[conn] = {qp.node: qp, remote.node: remote}
        qp.remote_lid = remote_lid
        qp.remote_qp_num = remote_qp_num
        qp.conn = conn

    def modify_srq(self, srq: SharedReceiveQueue, limit: int) -> None:
        self._live(srq)
        if not 0 <= limit <= srq.max_wr:
            raise InvalidRange(f"srq limit {limit} outside [0, {srq.max_wr}]")
        srq.limit = limit

    def query_port(self, ctx: Context) -> PortAttributes:
        self._live(ctx)
        return PortAttributes(lid=ctx.lid, port_index=ctx.node.port_index)

    def query_qp(self, qp: QueuePair) -> QpAttributes:
        self._live(qp)
        return QpAttributes(qp.qp_num, qp.state, qp.remote_lid, qp.remote_qp_num)

    def destroy(self, resource) -> None:
        self._live(resource)
        resource.live = False
        self._registry[resource.kind].pop(resource.handle, None)
        match resource:
            case QueuePair():
                self._qps_by_num.pop(resource.qp_num, None)
            case CompletionQueue():
                if resource.events:
                    logger.debug("destroy cq %#x discards %d events", resource.handle, len(resource.events))
                resource.events.clear()
            case MemoryRegion():
                self._lkeys[resource.pd.ctx.node].pop(resource.lkey, None)
                self._pd_rkeys[resource.pd.handle].pop(resource.rkey, None)

    # memory

    def _check_range(self, node: NodeAddr, addr: int, length: int) -> bytearray:
        memory = self._memory.get(node)
        if memory is None:
            raise AddressUnknown(f"endpoint {node} has no device open")
        if addr < 0 or length < 0 or addr + length > len(memory):
            raise InvalidRange(f"[{addr}, +{length}) outside node memory")
        return memory

    def read_memory(self, ctx: Context, addr: int, length: int) -> bytes:
        memory = self._check_range(ctx.node, addr, length)
        return bytes(memory[addr : addr + length])

    def write_memory(self, ctx: Context, addr: int, data: bytes) -> None:
        memory = self._check_range(ctx.node, addr, len(data))
        memory[addr : addr + len(data)] = data

    # data path (reached through the dispatch table)

    def _local_mr(self, qp: QueuePair, addr: int, length: int, lkey: int, write: bool) -> MemoryRegion:
        mr = self._lkeys[qp.node].get(lkey)
        if mr is None or not mr.live or mr.pd is not qp.pd:
            raise LocalAccessError("lkey not valid for this protection domain", lkey)
        if not mr.covers(addr, length):
            raise LocalAccessError("scatter/gather element outside its region", lkey)
        if write and not mr.access & AccessFlag.LOCAL_WRITE:
            raise LocalAccessError("region lacks LOCAL_WRITE", lkey)
        return mr

    def _check_sges(self, qp: QueuePair, wr: WorkRequest, write: bool) -> None:
        for sge in wr.sg_list:
            self._local_mr(qp, sge.addr, sge.length, sge.lkey, write)

    def _gather(self, qp: QueuePair, wr: WorkRequest) -> bytes:
        memory = self._memory[qp.node]
        return b"".join(bytes(memory[sge.addr : sge.addr + sge.length]) for sge in wr.sg_list)

    def _scatter(self, node: NodeAddr, wr: WorkRequest, data: bytes) -> None:
        memory = self._memory[node]
        offset = 0
        for sge in wr.sg_list:
            chunk = data[offset : offset + sge.length]
            memory[sge.addr : sge.addr + len(chunk)] = chunk
            offset += len(chunk)
            if offset >= len(data):
                break

    def _remote_mr(self, target: QueuePair, addr: int, length: int, rkey: int, access: AccessFlag) -> MemoryRegion:
        mr = self._pd_rkeys[target.pd.handle].get(rkey)
        if mr is None or not mr.live:
            raise RemoteAccessError("rkey not valid in the target protection domain", rkey)
        if not mr.covers(addr, length):
            raise RemoteAccessError("remote range outside the region", rkey)
        if not mr.access & access:
            raise RemoteAccessError(f"region lacks {access.name}", rkey)
        return mr

    def _post_send(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._live(qp)
        if qp.state != QpState.RTS:
            raise InvalidQpState(f"post_send needs RTS, qp is {qp.state.name}", qp.qp_num)
        if wr.opcode not in SEND_OPCODES:
            raise InvalidWorkRequest(f"{wr.opcode.name} is not a send opcode", wr.wr_id)
        wr.validate()
        if len(qp.send_queue) >= qp.max_send_wr:
            raise QueueFull("send queue full", qp.qp_num)
        if wr.inline_data is None:
            self._check_sges(qp, wr, write=wr.opcode == Opcode.RDMA_READ)
        target = self._qps_by_num.get(qp.remote_qp_num)
        if wr.opcode == Opcode.RDMA_READ:
            if target is not None:
                self._remote_mr(target, wr.remote_addr, wr.total_length, wr.rkey, AccessFlag.REMOTE_READ)
            frame = Frame(0, 0, FrameKind.RDMA_READ_REQ, READ_REQ.pack(wr.total_length),
                          remote_addr=wr.remote_addr, rkey=wr.rkey)
        else:
            data = wr.inline_data if wr.inline_data is not None else self._gather(qp, wr)
            if wr.opcode == Opcode.SEND:
                frame = Frame(0, 0, FrameKind.SEND_DATA, data, imm=wr.imm)
            else:
                if target is not None:
                    self._remote_mr(target, wr.remote_addr, len(data), wr.rkey, AccessFlag.REMOTE_WRITE)
                imm = wr.imm if wr.opcode == Opcode.RDMA_WRITE_WITH_IMM else None
                frame = Frame(0, 0, FrameKind.RDMA_WRITE_DATA, data, imm=imm,
                              remote_addr=wr.remote_addr, rkey=wr.rkey)
        seq = self.fabric.send(qp.conn, qp.node, frame)
        qp.send_queue.append(wr)
        qp.pending[seq] = wr
        logger.debug("post_send qp %#x wr %d %s seq %d", qp.qp_num, wr.wr_id, wr.opcode.name, seq)

    def _check_recv(self, wr: WorkRequest) -> None:
        if wr.opcode != Opcode.RECV:
            raise InvalidWorkRequest(f"{wr.opcode.name} posted to a receive queue", wr.wr_id)
        wr.validate()

    def _post_recv(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._live(qp)
        if qp.srq is not None:
            raise InvalidQpState("qp receives through a shared receive queue", qp.qp_num)
        if qp.state < QpState.INIT:
            raise InvalidQpState(f"post_recv needs INIT or later, qp is {qp.state.name}", qp.qp_num)
        self._check_recv(wr)
        if len(qp.recv_queue) >= qp.max_recv_wr:
            raise QueueFull("receive queue full", qp.qp_num)
        self._check_sges(qp, wr, write=True)
        qp.recv_queue.append(wr)

    def _post_srq_recv(self, srq: SharedReceiveQueue, wr: WorkRequest) -> None:
        self._live(srq)
        self._check_recv(wr)
        if len(srq.queue) >= srq.max_wr:
            raise QueueFull("shared receive queue full", srq.handle)
        node = srq.pd.ctx.node
        for sge in wr.sg_list:
            mr = self._lkeys[node].get(sge.lkey)
            if mr is None or not mr.live or mr.pd is not srq.pd or not mr.covers(sge.addr, sge.length):
                raise LocalAccessError("lkey not valid for this protection domain", sge.lkey)
        srq.queue.append(wr)

    def _poll_cq(self, cq: CompletionQueue, max_entries: int) -> list[CompletionEvent]:
        self._live(cq)
        if max_entries < 1:
            raise ValueError("max_entries must be positive")
        out = []
        while cq.events and len(out) < max_entries:
            out.append(cq.events.popleft())
        return out

    def progress(self, ticks: int) -> int:
        return self.fabric.advance(ticks)

    # frame handling

    def _complete(self, cq: CompletionQueue, event: CompletionEvent) -> None:
        if not cq.live:
            return
        if len(cq.events) >= cq.capacity:
            self.async_events.append((CQ_OVERRUN, cq.handle))
            logger.warning("cq %#x overrun, dropping completion for wr %d", cq.handle, event.wr_id)
            return
        cq.events.append(event)

    def _reply(self, qp: QueuePair, kind: FrameKind, payload: bytes, delay: int | None = None) -> None:
        self.fabric.send(qp.conn, qp.node, Frame(0, 0, kind, payload), delay=delay, app_originated=False)

    def _ack(self, qp: QueuePair, seq: int, status: AckStatus) -> None:
        self._reply(qp, FrameKind.DELIVERY_ACK, ACK.pack(seq, status),
                    delay=self.fabric.config.completion_skew_ticks)

    def _take_recv(self, qp: QueuePair) -> WorkRequest | None:
        srq = qp.srq
        if srq is None:
            return qp.recv_queue.popleft() if qp.recv_queue else None
        if not srq.live or not srq.queue:
            return None
        wr = srq.queue.popleft()
        if srq.limit and len(srq.queue) < srq.limit:
            self.async_events.append((SRQ_LIMIT_REACHED, srq.handle))
            logger.info("srq %#x below limit %d", srq.handle, srq.limit)
            srq.limit = 0
        return wr

    def _on_frame(self, frame: Frame, src: NodeAddr, dst: NodeAddr) -> None:
        qp = self._conn_qps.get(frame.conn_id, {}).get(dst)
        if qp is None or not qp.live:
            logger.warning("frame %d/%d for a destroyed queue pair at %s", frame.conn_id, frame.seq, dst)
            return
        match frame.kind:
            case FrameKind.DELIVERY_ACK:
                seq, status = ACK.unpack(frame.payload)
                self._on_ack(qp, seq, AckStatus(status))
            case FrameKind.RDMA_READ_RESP:
                (seq,) = READ_RESP.unpack_from(frame.payload)
                self._on_read_resp(qp, seq, frame.payload[READ_RESP.size :])
            case _ if qp.state < QpState.RTR:
                self._ack(qp, frame.seq, AckStatus.REMOTE_OP_ERROR)
            case FrameKind.SEND_DATA:
                self._on_send(qp, frame)
            case FrameKind.RDMA_WRITE_DATA:
                self._on_write(qp, frame)
            case FrameKind.RDMA_READ_REQ:
                self._on_read_req(qp, frame)

    def _on_send(self, qp: QueuePair, frame: Frame) -> None:
        wr = self._take_recv(qp)
        if wr is None:
            self._ack(qp, frame.seq, AckStatus.REMOTE_NOT_READY)
            return
        if len(frame.payload) > wr.total_length:
            self._complete(qp.recv_cq, CompletionEvent(
                wr.wr_id, WcStatus.ERR, Opcode.RECV, 0, qp.qp_num, error=AckStatus.LENGTH_ERROR.name,
            ))
            self._ack(qp, frame.seq, AckStatus.LENGTH_ERROR)
            return
        self._scatter(qp.node, wr, frame.payload)
        self._complete(qp.recv_cq, CompletionEvent(
            wr.wr_id, WcStatus.SUCCESS, Opcode.RECV, len(frame.payload), qp.qp_num, imm=frame.imm,
        ))
        self._ack(qp, frame.seq, AckStatus.OK)

    def _on_write(self, qp: QueuePair, frame: Frame) -> None:
        try:
            self._remote_mr(qp, frame.remote_addr, len(frame.payload), frame.rkey, AccessFlag.REMOTE_WRITE)
        except RemoteAccessError:
            self._ack(qp, frame.seq, AckStatus.REMOTE_ACCESS_ERROR)
            return
        wr = None
        if frame.imm is not None:
            wr = self._take_recv(qp)
            if wr is None:
                self._ack(qp, frame.seq, AckStatus.REMOTE_NOT_READY)
                return
        memory = self._memory[qp.node]
        memory[frame.remote_addr : frame.remote_addr + len(frame.payload)] = frame.payload
        if wr is not None:
            self._complete(qp.recv_cq, CompletionEvent(
                wr.wr_id, WcStatus.SUCCESS, Opcode.RECV_RDMA_WITH_IMM, len(frame.payload), qp.qp_num,
                imm=frame.imm,
            ))
        self._ack(qp, frame.seq, AckStatus.OK)

    def _on_read_req(self, qp: QueuePair, frame: Frame) -> None:
        (length,) = READ_REQ.unpack(frame.payload)
        try:
            self._remote_mr(qp, frame.remote_addr, length, frame.rkey, AccessFlag.REMOTE_READ)
        except RemoteAccessError:
            self._ack(qp, frame.seq, AckStatus.REMOTE_ACCESS_ERROR)
            return
        data = bytes(self._memory[qp.node][frame.remote_addr : frame.remote_addr + length])
        self._reply(qp, FrameKind.RDMA_READ_RESP, READ_RESP.pack(frame.seq) + data)

    def _retire(self, qp: QueuePair, seq: int) -> WorkRequest | None:
        wr = qp.pending.pop(seq, None)
        if wr is None:
            logger.warning("qp %#x: response for unknown seq %d", qp.qp_num, seq)
            return None
        for i, queued in enumerate(qp.send_queue):
            if queued is wr:
                del qp.send_queue[i]
                break
        return wr

    def _on_ack(self, qp: QueuePair, seq: int, status: AckStatus) -> None:
        wr = self._retire(qp, seq)
        if wr is None:
            return
        if status == AckStatus.OK:
            if wr.signaled:
                length = len(wr.inline_data) if wr.inline_data is not None else wr.total_length
                self._complete(qp.send_cq, CompletionEvent(
                    wr.wr_id, WcStatus.SUCCESS, wr.opcode, length, qp.qp_num,
                ))
            return
        # failures always complete, signaled or not
        logger.debug("qp %#x wr %d failed remotely: %s", qp.qp_num, wr.wr_id, status.name)
        self._complete(qp.send_cq, CompletionEvent(
            wr.wr_id, WcStatus.ERR, wr.opcode, 0, qp.qp_num, error=status.name,
        ))

    def _on_read_resp(self, qp: QueuePair, seq: int, data: bytes) -> None:
        wr = self._retire(qp, seq)
        if wr is None:
            return
        self._scatter(qp.node, wr, data)
        if wr.signaled:
            self._complete(qp.send_cq, CompletionEvent(
                wr.wr_id, WcStatus.SUCCESS, Opcode.RDMA_READ, len(data), qp.qp_num,
            ))

    # introspection

    def queued_wr_ids(self, resource, queue: QueueKind) -> list[int]:
        match queue:
            case QueueKind.SEND:
                return [wr.wr_id for wr in resource.send_queue]
            case QueueKind.RECV:
                return [wr.wr_id for wr in resource.recv_queue]
            case QueueKind.SRQ:
                return [wr.wr_id for wr in resource.queue]
        raise ValueError(queue)

    def snapshot(self) -> dict[NodeAddr, EndpointSnapshot]:
        out = {node: EndpointSnapshot(node, self.lid_of(node)) for node in self._memory}
        for ctx in self._registry[ResourceKind.CTX].values():
            out[ctx.node].contexts.append(ctx.handle)
        for pd in self._registry[ResourceKind.PD].values():
            out[pd.ctx.node].pds.append(pd.handle)
        for mr in self._registry[ResourceKind.MR].values():
            out[mr.pd.ctx.node].mrs.append(mr.handle)
        for cq in self._registry[ResourceKind.CQ].values():
            out[cq.ctx.node].cq_depths[cq.handle] = len(cq.events)
        for srq in self._registry[ResourceKind.SRQ].values():
            out[srq.pd.ctx.node].srqs[srq.handle] = [wr.wr_id for wr in srq.queue]
        for qp in self._registry[ResourceKind.QP].values():
            remote = (qp.remote_lid, qp.remote_qp_num) if qp.remote_qp_num is not None else None
            out[qp.node].qps.append(QpSnapshot(
                qp.handle, qp.qp_num, qp.state,
                [wr.wr_id for wr in qp.send_queue], [wr.wr_id for wr in qp.recv_queue], remote,
            ))
        for node, snap in out.items():
            snap.in_flight = self.fabric.in_flight(node)
        return out
