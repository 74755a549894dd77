"""Creation/modify log and work-request bookkeeping.

Every record here is in virtual ids; nothing in these logs survives a
restart in real terms.
"""

from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace

from ibcr.domain.models import Opcode
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import ScatterGather
from ibcr.domain.models import TransitionKind
from ibcr.domain.models import WorkRequest
from ibcr.domain.state import CreationRecordState
from ibcr.domain.state import ModifyRecordState
from ibcr.domain.state import ResourceLogState
from ibcr.domain.state import WqeLogState
from ibcr.domain.state import WqeRecordState


@dataclass
class CreationRecord:
    kind: ResourceKind
    virtual_id: int
    params: dict[str, int | None]
    visible: dict[str, int | None]


@dataclass
class ModifyRecord:
    kind: ResourceKind
    virtual_id: int
    transition: TransitionKind | None = None
    remote_lid: int | None = None
    remote_qp_num: int | None = None
    srq_limit: int | None = None


class ResourceLog:
    def __init__(self):
        self.creations: list[CreationRecord] = []
        self.modifies: list[ModifyRecord] = []

    def __len__(self) -> int:
        return len(self.creations)

    def record_creation(self, record: CreationRecord) -> None:
        self.creations.append(record)

    def record_modify(self, record: ModifyRecord) -> None:
        self.modifies.append(record)

    def forget(self, kind: ResourceKind, virtual_id: int) -> None:
        self.creations = [r for r in self.creations if (r.kind, r.virtual_id) != (kind, virtual_id)]
        self.modifies = [r for r in self.modifies if (r.kind, r.virtual_id) != (kind, virtual_id)]

    def to_state(self) -> ResourceLogState:
        return ResourceLogState(
            creations=[CreationRecordState(**vars(r)) for r in self.creations],
            modifies=[ModifyRecordState(**vars(r)) for r in self.modifies],
        )

    @classmethod
    def from_state(cls, state: ResourceLogState) -> "ResourceLog":
        log = cls()
        log.creations = [CreationRecord(r.kind, r.virtual_id, dict(r.params), dict(r.visible)) for r in state.creations]
        log.modifies = [ModifyRecord(**r.model_dump()) for r in state.modifies]
        return log


@dataclass
class WqeRecord:
    queue: QueueKind
    owner: int
    index: int
    wr: WorkRequest
    inline_payload: bytes | None = None
    reposted: bool = False

    @property
    def wr_id(self) -> int:
        return self.wr.wr_id

    @property
    def signaled(self) -> bool:
        return self.wr.signaled


@dataclass
class WqeLog:
    """Posted work requests not yet completed as far as the application knows.

    Entries are kept per (queue, owner) in post order; ``index`` is a
    process-wide post counter.
    """

    queues: dict[tuple[QueueKind, int], list[WqeRecord]] = field(default_factory=dict)
    next_index: int = 0

    def __len__(self) -> int:
        return sum(len(entries) for entries in self.queues.values())

    def add(self, queue: QueueKind, owner: int, wr: WorkRequest, inline_payload: bytes | None = None) -> WqeRecord:
        record = WqeRecord(queue, owner, self.next_index, replace(wr, inline_data=None), inline_payload)
        self.next_index += 1
        self.queues.setdefault((queue, owner), []).append(record)
        return record

    def remove(self, queue: QueueKind, owner: int, wr_id: int) -> WqeRecord | None:
        """Drop and return the oldest entry with ``wr_id``."""
        entries = self.queues.get((queue, owner), [])
        for i, record in enumerate(entries):
            if record.wr_id == wr_id:
                return entries.pop(i)
        return None

    def discard(self, record: WqeRecord) -> None:
        entries = self.queues.get((record.queue, record.owner), [])
        self.queues[(record.queue, record.owner)] = [r for r in entries if r is not record]

    def prune_unsignaled(self, owner: int, before_index: int) -> list[WqeRecord]:
        entries = self.queues.get((QueueKind.SEND, owner), [])
        pruned = [r for r in entries if not r.signaled and r.index < before_index]
        if pruned:
            self.queues[(QueueKind.SEND, owner)] = [r for r in entries if r.signaled or r.index >= before_index]
        return pruned

    def drop_owner(self, owner: int, queues: tuple[QueueKind, ...] = tuple(QueueKind)) -> None:
        for key in [k for k in self.queues if k[1] == owner and k[0] in queues]:
            del self.queues[key]

    def entries(self, queue: QueueKind | None = None, owner: int | None = None) -> list[WqeRecord]:
        out = [
            record
            for (q, o), records in self.queues.items()
            if (queue is None or q == queue) and (owner is None or o == owner)
            for record in records
        ]
        return sorted(out, key=lambda r: r.index)

    def wr_ids(self, queue: QueueKind, owner: int) -> list[int]:
        return [r.wr_id for r in self.queues.get((queue, owner), [])]

    def pending_reposts(self) -> int:
        return sum(1 for r in self.entries() if r.reposted)

    def to_state(self) -> WqeLogState:
        return WqeLogState(
            entries=[
                WqeRecordState(
                    queue=r.queue,
                    owner=r.owner,
                    index=r.index,
                    wr_id=r.wr.wr_id,
                    opcode=int(r.wr.opcode),
                    sg_list=[(s.addr, s.length, s.lkey) for s in r.wr.sg_list],
                    signaled=r.wr.signaled,
                    inline_flag=r.wr.inline_flag,
                    remote_addr=r.wr.remote_addr,
                    rkey=r.wr.rkey,
                    imm=r.wr.imm,
                    inline_payload=r.inline_payload,
                    reposted=r.reposted,
                )
                for r in self.entries()
            ],
            next_index=self.next_index,
        )

    @classmethod
    def from_state(cls, state: WqeLogState) -> "WqeLog":
        log = cls(next_index=state.next_index)
        for s in state.entries:
            wr = WorkRequest(
                wr_id=s.wr_id,
                opcode=Opcode(s.opcode),
                sg_list=tuple(ScatterGather(*sge) for sge in s.sg_list),
                signaled=s.signaled,
                inline_flag=s.inline_flag,
                remote_addr=s.remote_addr,
                rkey=s.rkey,
                imm=s.imm,
            )
            record = WqeRecord(s.queue, s.owner, s.index, wr, s.inline_payload, s.reposted)
            log.queues.setdefault((s.queue, s.owner), []).append(record)
        return log
