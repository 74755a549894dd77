"""Shared plumbing for the traffic generators.

A workload owns one context, one protection domain, one memory region over
its buffers and a send/receive completion queue pair; each peer gets its own
queue pair. Everything the workload keeps between steps is plain data so it
can be written into a checkpoint image and picked up again after a restart,
when handles are looked up again by their (virtual) ids.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any

from ibcr.adapters.verbs import inline
from ibcr.domain.errors import WorkloadError
from ibcr.domain.models import AccessFlag
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Opcode
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import ScatterGather
from ibcr.domain.models import Transition
from ibcr.domain.models import WcStatus
from ibcr.domain.models import WorkRequest
from ibcr.domain.ports import VerbsProtocol
from ibcr.domain.ports import WorkloadProtocol
from ibcr.domain.state import WorkloadStateImage
from ibcr.domain.validation import SpecError
from ibcr.domain.workload import Transcript
from ibcr.domain.workload import TranscriptEntry
from ibcr.domain.workload import WorkloadSpec
from ibcr.hash import payload_hash


logger = logging.getLogger(__name__)

ALL_ACCESS = AccessFlag.LOCAL_WRITE | AccessFlag.REMOTE_WRITE | AccessFlag.REMOTE_READ
POLL_BATCH = 32

# wr_id layout: tag << 40 | peer << 32 | index
TAG_SEND = 1
TAG_RECV = 2
TAG_READ = 3

_HANDLES = {
    "ctx": ResourceKind.CTX,
    "pd": ResourceKind.PD,
    "mr": ResourceKind.MR,
    "send_cq": ResourceKind.CQ,
    "recv_cq": ResourceKind.CQ,
    "srq": ResourceKind.SRQ,
}


def wr_id(tag: int, peer: int, index: int) -> int:
    return (tag << 40) | (peer << 32) | (index & 0xFFFFFFFF)


def split_wr_id(value: int) -> tuple[int, int, int]:
    return value >> 40, (value >> 32) & 0xFF, value & 0xFFFFFFFF


def slot_size(msg_size: int) -> int:
    return -(-msg_size // 64) * 64


def with_imm(data: bytes, imm: int | None) -> bytes:
    return data if imm is None else data + imm.to_bytes(4, "little")


@dataclass(frozen=True)
class PeerInfo:
    """What one side tells the other out of band before connecting."""

    lid: int
    qp_num: int
    addr: int = 0
    rkey: int = 0

    def to_list(self) -> list[int]:
        return [self.lid, self.qp_num, self.addr, self.rkey]


class Workload(WorkloadProtocol):
    name: str = ""

    def __init__(self, spec: WorkloadSpec, rank: int, n_ranks: int):
        spec.check_ranks(n_ranks)
        self.spec = spec
        self.rank = rank
        self.n_ranks = n_ranks
        self.slot = slot_size(spec.msg_size)
        self.verbs: VerbsProtocol | None = None
        self.handles: dict[str, int] = {}
        self.qp_handles: dict[int, int] = {}
        self.remote: dict[int, PeerInfo] = {}
        self.records: dict[int, list[tuple[int, int, int, str]]] = {p: [] for p in self.peers()}
        self.bytes_sent = 0
        self.bytes_received = 0
        self._res: dict[str, Any] = {}
        self._qps: dict[int, Any] = {}

    # protocol hooks

    def peers(self) -> list[int]:
        raise NotImplementedError

    def region_length(self) -> int:
        raise NotImplementedError

    def srq_depth(self) -> int:
        """Depth of a shared receive queue; 0 means none."""
        return 0

    def max_send_wr(self) -> int:
        return 4

    def max_recv_wr(self) -> int:
        return 4

    def prime(self, peer: int) -> None:
        """Post the receives a peer may need before it sends anything."""

    def on_completion(self, event: CompletionEvent) -> None:
        raise NotImplementedError

    def advance(self) -> bool:
        raise NotImplementedError

    def save(self) -> dict[str, Any]:
        return {}

    def load(self, data: dict[str, Any]) -> None:
        pass

    @property
    def done(self) -> bool:
        raise NotImplementedError

    @property
    def started(self) -> int:
        raise NotImplementedError

    # setup

    def setup(self, verbs: VerbsProtocol, node: NodeAddr) -> dict[int, PeerInfo]:
        self.verbs = verbs
        length = self.region_length()
        memory = getattr(verbs, "memory_bytes", None) or getattr(getattr(verbs, "engine", None), "memory_bytes", None)
        if memory is not None and length > memory:
            raise SpecError(f"{self.name} rank {self.rank} needs {length} bytes, endpoint has {memory}")
        ctx = verbs.open_device(node)
        pd = verbs.alloc_pd(ctx)
        mr = verbs.reg_mr(pd, 0, length, ALL_ACCESS)
        peers = self.peers()
        capacity = max(16, 2 * len(peers) * max(self.max_send_wr(), self.max_recv_wr()))
        send_cq = verbs.create_cq(ctx, capacity)
        recv_cq = verbs.create_cq(ctx, capacity)
        srq = verbs.create_srq(pd, self.srq_depth()) if self.srq_depth() else None
        self._res = {"ctx": ctx, "pd": pd, "mr": mr, "send_cq": send_cq, "recv_cq": recv_cq, "srq": srq}
        self.handles = {k: v.handle for k, v in self._res.items() if v is not None}
        lid = verbs.query_port(ctx).lid
        out = {}
        for peer in peers:
            qp = verbs.create_qp(
                pd, send_cq, recv_cq, srq, max_send_wr=self.max_send_wr(), max_recv_wr=self.max_recv_wr()
            )
            self._qps[peer] = qp
            self.qp_handles[peer] = qp.handle
            out[peer] = self.peer_info(peer, lid, qp)
        return out

    def peer_info(self, peer: int, lid: int, qp: Any) -> PeerInfo:
        return PeerInfo(lid, qp.qp_num)

    def connect(self, remote: dict[int, PeerInfo]) -> None:
        """INIT, prime receives, RTR against the peer, RTS."""
        for peer in self.peers():
            info = remote[peer]
            self.remote[peer] = info
            qp = self._qps[peer]
            self.verbs.modify_qp(qp, Transition.to_init())
            self.prime(peer)
            self.verbs.modify_qp(qp, Transition.to_rtr(info.lid, info.qp_num))
            self.verbs.modify_qp(qp, Transition.to_rts())

    # data path helpers

    @property
    def mr(self) -> Any:
        return self._res["mr"]

    @property
    def srq(self) -> Any:
        return self._res["srq"]

    def sge(self, addr: int, length: int) -> tuple[ScatterGather, ...]:
        return (ScatterGather(addr, length, self.mr.lkey),)

    def write(self, addr: int, data: bytes) -> None:
        self.verbs.write_memory(self._res["ctx"], addr, data)

    def read(self, addr: int, length: int) -> bytes:
        return self.verbs.read_memory(self._res["ctx"], addr, length)

    def post_send(self, peer: int, wr: WorkRequest) -> None:
        inline.post_send(self._qps[peer], wr)
        if wr.opcode != Opcode.RDMA_READ:
            self.bytes_sent += wr.total_length

    def post_recv(self, peer: int, index: int, addr: int, length: int) -> None:
        sg = self.sge(addr, length) if length else ()
        inline.post_recv(self._qps[peer], WorkRequest(wr_id(TAG_RECV, peer, index), Opcode.RECV, sg))

    def post_srq_recv(self, index: int, addr: int, length: int) -> None:
        inline.post_srq_recv(self.srq, WorkRequest(wr_id(TAG_RECV, 0, index), Opcode.RECV, self.sge(addr, length)))

    def record(self, peer: int, event: CompletionEvent, data: bytes) -> None:
        self.records[peer].append((event.wr_id, int(event.opcode), event.byte_len, payload_hash(data)))

    def poll(self) -> int:
        seen = 0
        for name in ("send_cq", "recv_cq"):
            while events := inline.poll_cq(self._res[name], POLL_BATCH):
                for event in events:
                    if event.status != WcStatus.SUCCESS:
                        raise WorkloadError(
                            f"{self.name} rank {self.rank}: wr {event.wr_id:#x} {event.opcode.name} failed: {event.error}"
                        )
                    if event.opcode in (Opcode.RECV, Opcode.RECV_RDMA_WITH_IMM):
                        self.bytes_received += event.byte_len
                    self.on_completion(event)
                seen += len(events)
        return seen

    def step(self) -> bool:
        if self.verbs is None:
            raise WorkloadError(f"{self.name} rank {self.rank} stepped before setup")
        polled = self.poll()
        posted = self.advance()
        return bool(polled) or posted

    # results

    def transcript(self) -> Transcript:
        """Per-peer records concatenated in peer order."""
        rows: Iterable[tuple[int, int, int, str]] = (row for peer in sorted(self.records) for row in self.records[peer])
        return Transcript([
            TranscriptEntry(i, w, Opcode(o), n, h) for i, (w, o, n, h) in enumerate(rows)
        ])

    # checkpoint support

    def state(self) -> WorkloadStateImage:
        return WorkloadStateImage(
            name=self.spec.name,
            data={
                "spec": self.spec.to_dict(),
                "rank": self.rank,
                "n_ranks": self.n_ranks,
                "handles": dict(self.handles),
                "qps": {str(p): h for p, h in self.qp_handles.items()},
                "remote": {str(p): info.to_list() for p, info in self.remote.items()},
                "records": {str(p): [list(r) for r in rows] for p, rows in self.records.items()},
                "bytes_sent": self.bytes_sent,
                "bytes_received": self.bytes_received,
                "progress": self.save(),
            },
        )

    def restore(self, verbs: VerbsProtocol, state: WorkloadStateImage) -> None:
        data = state.data
        self.verbs = verbs
        self.handles = {k: int(v) for k, v in data["handles"].items()}
        self._res = {k: verbs.resolve(_HANDLES[k], v) for k, v in self.handles.items()}
        self._res.setdefault("srq", None)
        self.qp_handles = {int(p): int(h) for p, h in data["qps"].items()}
        self._qps = {p: verbs.resolve(ResourceKind.QP, h) for p, h in self.qp_handles.items()}
        self.remote = {int(p): PeerInfo(*v) for p, v in data["remote"].items()}
        self.records = {int(p): [(int(w), int(o), int(n), str(h)) for w, o, n, h in rows]
                        for p, rows in data["records"].items()}
        self.bytes_sent = int(data["bytes_sent"])
        self.bytes_received = int(data["bytes_received"])
        self.load(data["progress"])
        logger.debug("%s rank %d restored", self.name, self.rank)
