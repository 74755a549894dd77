"""Real resource records owned by the verbs engine.

Records compare by identity. ``live`` flips to False on destroy and every
engine entry point checks it before touching the record.
"""

from collections import deque
from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import field
from typing import Any

from ibcr.domain.errors import VerbsError
from ibcr.domain.models import AccessFlag
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import QpState
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import WorkRequest


SLOTS = ("post_send", "post_recv", "post_srq_recv", "poll_cq")


@dataclass(eq=False)
class DispatchTable:
    """Function slots for the data path, one per post/poll call.

    An interposition layer replaces the slots it needs once and keeps the
    previous functions to call through to.
    """

    post_send: Callable[[Any, WorkRequest], None]
    post_recv: Callable[[Any, WorkRequest], None]
    post_srq_recv: Callable[[Any, WorkRequest], None]
    poll_cq: Callable[[Any, int], list[CompletionEvent]]
    layers: list[str] = field(default_factory=list)

    def rebind(self, layer: str, **slots: Callable) -> dict[str, Callable]:
        if layer in self.layers:
            raise VerbsError(f"dispatch layer {layer!r} already installed")
        unknown = set(slots) - set(SLOTS)
        if unknown:
            raise VerbsError(f"unknown dispatch slots {sorted(unknown)}")
        previous = {name: getattr(self, name) for name in SLOTS}
        for name, fn in slots.items():
            if fn is None:
                raise VerbsError(f"dispatch slot {name} must not be empty")
            setattr(self, name, fn)
        self.layers.append(layer)
        return previous


@dataclass(eq=False)
class Context:
    handle: int
    node: NodeAddr
    lid: int
    dispatch: DispatchTable
    live: bool = True
    kind = ResourceKind.CTX


@dataclass(eq=False)
class ProtectionDomain:
    handle: int
    ctx: Context
    global_pd_uid: int
    next_rkey: int = 1
    live: bool = True
    kind = ResourceKind.PD

    @property
    def dispatch(self) -> DispatchTable:
        return self.ctx.dispatch


@dataclass(eq=False)
class MemoryRegion:
    handle: int
    pd: ProtectionDomain
    base_addr: int
    length: int
    lkey: int
    rkey: int
    access: AccessFlag
    live: bool = True
    kind = ResourceKind.MR

    @property
    def dispatch(self) -> DispatchTable:
        return self.pd.dispatch

    def covers(self, addr: int, length: int) -> bool:
        return self.base_addr <= addr and addr + length <= self.base_addr + self.length


@dataclass(eq=False)
class CompletionQueue:
    handle: int
    ctx: Context
    capacity: int
    events: deque[CompletionEvent] = field(default_factory=deque)
    live: bool = True
    kind = ResourceKind.CQ

    @property
    def dispatch(self) -> DispatchTable:
        return self.ctx.dispatch


@dataclass(eq=False)
class SharedReceiveQueue:
    handle: int
    pd: ProtectionDomain
    max_wr: int
    limit: int = 0
    queue: deque[WorkRequest] = field(default_factory=deque)
    live: bool = True
    kind = ResourceKind.SRQ

    @property
    def dispatch(self) -> DispatchTable:
        return self.pd.dispatch


@dataclass(eq=False)
class QueuePair:
    handle: int
    pd: ProtectionDomain
    send_cq: CompletionQueue
    recv_cq: CompletionQueue
    qp_num: int
    srq: SharedReceiveQueue | None = None
    max_send_wr: int = 64
    max_recv_wr: int = 64
    state: QpState = QpState.RESET
    remote_lid: int | None = None
    remote_qp_num: int | None = None
    conn: int | None = None
    send_queue: deque[WorkRequest] = field(default_factory=deque)
    recv_queue: deque[WorkRequest] = field(default_factory=deque)
    # fabric seq -> send WQE awaiting its ack or read response
    pending: dict[int, WorkRequest] = field(default_factory=dict)
    live: bool = True
    kind = ResourceKind.QP

    @property
    def dispatch(self) -> DispatchTable:
        return self.pd.dispatch

    @property
    def node(self) -> NodeAddr:
        return self.pd.ctx.node
