"""Checkpoint-restart interposition layer for one process.

The application only ever holds ``ShadowDescriptor`` objects and virtual ids.
Creation calls go through ``CrPlugin`` methods; posts and polls reach it
because ``open_device`` rebinds the context's dispatch table to the wrappers
below. At checkpoint time the plugin drains completions into private queues;
at restart it replays the resource log against a fresh engine, exchanges the
new real ids through the coordinator and re-posts every logged work request.
"""

import logging
import threading
from collections import Counter
from collections import deque
from collections.abc import Callable
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import Any

from ibcr.adapters.plugin.logs import CreationRecord
from ibcr.adapters.plugin.logs import ModifyRecord
from ibcr.adapters.plugin.logs import ResourceLog
from ibcr.adapters.plugin.logs import WqeLog
from ibcr.adapters.plugin.tables import RKEY_KEY
from ibcr.adapters.plugin.tables import U32
from ibcr.adapters.plugin.tables import U64
from ibcr.adapters.plugin.tables import RkeyDirectory
from ibcr.adapters.plugin.tables import TranslationTable
from ibcr.adapters.verbs.engine import VerbsEngine
from ibcr.adapters.verbs.resources import DispatchTable
from ibcr.domain.errors import InvalidWorkRequest
from ibcr.domain.errors import RestartDirectoryIncomplete
from ibcr.domain.errors import StaleHandle
from ibcr.domain.errors import UnknownRemoteVirtualId
from ibcr.domain.errors import UnknownVrkey
from ibcr.domain.errors import VerbsError
from ibcr.domain.errors import VirtualIdConflict
from ibcr.domain.models import RECV_CONSUMING
from ibcr.domain.models import REMOTE_VISIBLE
from ibcr.domain.models import AccessFlag
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import DrainReport
from ibcr.domain.models import DrainRound
from ibcr.domain.models import IdClass
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import Namespace
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Opcode
from ibcr.domain.models import PortAttributes
from ibcr.domain.models import QpAttributes
from ibcr.domain.models import QpState
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import RestartReport
from ibcr.domain.models import ScatterGather
from ibcr.domain.models import Transition
from ibcr.domain.models import TransitionKind
from ibcr.domain.models import WcStatus
from ibcr.domain.models import WorkRequest
from ibcr.domain.ports import CoordinatorSessionProtocol
from ibcr.domain.settings import PluginSettings
from ibcr.domain.state import DrainedCqState
from ibcr.domain.state import DrainedEventState
from ibcr.domain.state import MemoryRegionState
from ibcr.domain.state import NodeImage
from ibcr.domain.state import PluginState


logger = logging.getLogger(__name__)

LAYER = "ibcr"
_RECV_OPCODES = frozenset({Opcode.RECV, Opcode.RECV_RDMA_WITH_IMM})
_HANDLE_CLASSES = tuple(IdClass(kind.value) for kind in ResourceKind)


@dataclass(eq=False)
class ShadowDescriptor:
    """What the application holds instead of a real resource.

    Attribute reads fall back to ``visible``, so ``qp.qp_num`` or ``mr.rkey``
    return the virtual values recorded at creation.
    """

    kind: ResourceKind
    virtual_id: int
    visible: dict[str, Any]
    real_ref: Any
    ctx: int
    live: bool = True

    def __getattr__(self, name: str) -> Any:
        if name.startswith("__") or name == "visible":
            raise AttributeError(name)
        try:
            return self.visible[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def handle(self) -> int:
        return self.virtual_id

    @property
    def dispatch(self) -> DispatchTable:
        return self.real_ref.dispatch


@dataclass
class _Tally:
    recv_seen: Counter = field(default_factory=Counter)
    send_retired: Counter = field(default_factory=Counter)


def delivered_counts(rounds: list[DrainRound]) -> Counter:
    """Receive completions per receiving QP, summed over every node."""
    seen: Counter = Counter()
    for r in rounds:
        seen.update(r.recv_seen)
    return seen


def unresolved_pairs(rounds: list[DrainRound]) -> int:
    """Receive completions seen that the sending side has not retired yet."""
    seen = delivered_counts(rounds)
    retired: Counter = Counter()
    for r in rounds:
        retired.update(r.send_retired)
    return sum(max(0, count - retired[key]) for key, count in seen.items())


class CrPlugin:
    def __init__(
        self,
        engine: VerbsEngine,
        *,
        rank: int = 0,
        n_ranks: int = 1,
        settings: PluginSettings | None = None,
    ):
        self.engine = engine
        self.rank = rank
        self.n_ranks = n_ranks
        self.settings = settings or PluginSettings()
        self.policy = IdPolicy(self.settings.id_policy)
        self.node: NodeAddr | None = None
        self.restarted = False
        self.table = TranslationTable()
        self.directory = RkeyDirectory()
        self.resources = ResourceLog()
        self.wqes = WqeLog()
        self.tally = _Tally()
        self.counters: Counter = Counter()
        self.hybrid_base: dict[str, int] = {}
        self.drained_events = 0
        self._lock = threading.RLock()
        self._shadows: dict[tuple[ResourceKind, int], ShadowDescriptor] = {}
        self._native: dict[int, dict[str, Callable]] = {}
        self._vcq: dict[int, deque[CompletionEvent]] = {}
        self._qp_by_vqpn: dict[int, ShadowDescriptor] = {}

    # id assignment

    @property
    def identity_fallback(self) -> bool:
        if self.policy == IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE:
            return True
        return self.policy == IdPolicy.PUBLISH_AFTER_RESTART and not self.restarted

    def _next_virtual(self, id_class: IdClass, real: int, port_index: int = 0) -> int:
        if id_class == IdClass.PD_UID:
            return real
        if id_class == IdClass.LID:
            existing = self.table[IdClass.LID].virtual(real)
            if existing is not None:
                return existing
        if self.policy == IdPolicy.GLOBALLY_UNIQUE_VIRTUAL:
            self.counters[id_class] += 1
            n = self.counters[id_class]
            if id_class == IdClass.LID:
                return ((self.rank + 1) << 8) | port_index
            if id_class in _HANDLE_CLASSES:
                return ((self.rank + 1) << 32) | n
            return (self.rank << 24) | n
        if self.policy == IdPolicy.PUBLISH_AFTER_RESTART and self.restarted:
            k = self.counters[f"strided:{id_class}"]
            self.counters[f"strided:{id_class}"] += 1
            base = self.hybrid_base.get(str(id_class), 0)
            return base + 1 + self.rank + k * self.n_ranks
        return real

    def _claim(self, id_class: IdClass, virtual, real) -> None:
        if id_class == IdClass.QP_NUM and virtual in self.directory.qp_real and virtual not in self.table[id_class]:
            raise VirtualIdConflict(f"virtual qp_num {virtual:#x} already published by a peer")
        self.table[id_class].add(virtual, real)

    # helpers

    def _live(self, shadow: Any, kind: ResourceKind | None = None) -> ShadowDescriptor:
        if not isinstance(shadow, ShadowDescriptor) or not shadow.live:
            raise StaleHandle("stale handle", getattr(shadow, "virtual_id", None))
        if kind is not None and shadow.kind != kind:
            raise StaleHandle(f"expected a {kind} handle, got {shadow.kind}", shadow.virtual_id)
        return shadow

    @contextmanager
    def _virtual_errors(self, shadow: ShadowDescriptor | None):
        try:
            yield
        except VerbsError as err:
            if isinstance(err, InvalidWorkRequest):
                raise
            subject = self.table.virtualize(err.subject) if err.subject is not None else None
            if subject is None and shadow is not None:
                subject = shadow.virtual_id
            raise err.with_subject(subject) from None

    def _remember(self, kind: ResourceKind, real, ctx: int, params: dict, visible: dict) -> ShadowDescriptor:
        vid = self._next_virtual(IdClass(kind.value), real.handle)
        self._claim(IdClass(kind.value), vid, real.handle)
        shadow = ShadowDescriptor(kind, vid, visible, real, ctx if kind != ResourceKind.CTX else vid)
        self._shadows[(kind, vid)] = shadow
        self.resources.record_creation(CreationRecord(kind, vid, params, dict(visible)))
        return shadow

    def _qp_key(self, qp: ShadowDescriptor) -> tuple[int, int]:
        return (qp.visible["lid"], qp.visible["qp_num"])

    def _remote_key(self, qp: ShadowDescriptor) -> tuple[int, int]:
        return (qp.visible["remote_lid"], qp.visible["remote_qp_num"])

    def resolve(self, kind: ResourceKind, handle: int) -> ShadowDescriptor:
        shadow = self._shadows.get((ResourceKind(kind), handle))
        if shadow is None:
            raise StaleHandle("no such virtual handle", handle)
        return shadow

    def shadows(self, kind: ResourceKind | None = None) -> list[ShadowDescriptor]:
        return [s for (k, _), s in self._shadows.items() if kind is None or k == kind]

    # creation and control wrappers

    def open_device(self, node: NodeAddr) -> ShadowDescriptor:
        with self._lock:
            real = self.engine.open_device(node)
            self.node = node
            vlid = self._next_virtual(IdClass.LID, real.lid, node.port_index)
            self.table[IdClass.LID].add(vlid, real.lid)
            visible = {"lid": vlid, "node_id": node.node_id, "port_index": node.port_index}
            shadow = self._remember(ResourceKind.CTX, real, 0, {}, visible)
            self._interpose(shadow)
            logger.debug("rank %d open_device %s -> vctx %#x", self.rank, node, shadow.virtual_id)
            return shadow

    def _interpose(self, ctx: ShadowDescriptor) -> None:
        self._native[ctx.virtual_id] = ctx.real_ref.dispatch.rebind(
            LAYER,
            post_send=self._wrap_post_send,
            post_recv=self._wrap_post_recv,
            post_srq_recv=self._wrap_post_srq_recv,
            poll_cq=self._wrap_poll_cq,
        )

    def alloc_pd(self, ctx: ShadowDescriptor) -> ShadowDescriptor:
        with self._lock:
            ctx = self._live(ctx, ResourceKind.CTX)
            with self._virtual_errors(ctx):
                real = self.engine.alloc_pd(ctx.real_ref)
            uid = self._next_virtual(IdClass.PD_UID, real.global_pd_uid)
            self._claim(IdClass.PD_UID, uid, real.global_pd_uid)
            return self._remember(
                ResourceKind.PD, real, ctx.virtual_id, {"ctx": ctx.virtual_id}, {"global_pd_uid": uid}
            )

    def reg_mr(self, pd: ShadowDescriptor, base_addr: int, length: int, access: AccessFlag) -> ShadowDescriptor:
        with self._lock:
            pd = self._live(pd, ResourceKind.PD)
            with self._virtual_errors(pd):
                real = self.engine.reg_mr(pd.real_ref, base_addr, length, access)
            uid = pd.visible["global_pd_uid"]
            vlkey = self._next_virtual(IdClass.LKEY, real.lkey)
            vrkey = self._next_virtual(IdClass.RKEY, real.rkey)
            self._claim(IdClass.LKEY, vlkey, real.lkey)
            self._claim(IdClass.RKEY, (uid, vrkey), (uid, real.rkey))
            params = {"pd": pd.virtual_id, "base_addr": base_addr, "length": length, "access": int(access)}
            visible = {"lkey": vlkey, "rkey": vrkey, "base_addr": base_addr, "length": length, "access": int(access)}
            return self._remember(ResourceKind.MR, real, pd.ctx, params, visible)

    def create_cq(self, ctx: ShadowDescriptor, capacity: int | None = None) -> ShadowDescriptor:
        with self._lock:
            ctx = self._live(ctx, ResourceKind.CTX)
            with self._virtual_errors(ctx):
                real = self.engine.create_cq(ctx.real_ref, capacity)
            shadow = self._remember(
                ResourceKind.CQ, real, ctx.virtual_id,
                {"ctx": ctx.virtual_id, "capacity": real.capacity}, {"capacity": real.capacity},
            )
            self._vcq[shadow.virtual_id] = deque()
            return shadow

    def create_srq(self, pd: ShadowDescriptor, max_wr: int, limit: int = 0) -> ShadowDescriptor:
        with self._lock:
            pd = self._live(pd, ResourceKind.PD)
            with self._virtual_errors(pd):
                real = self.engine.create_srq(pd.real_ref, max_wr, limit)
            return self._remember(
                ResourceKind.SRQ, real, pd.ctx,
                {"pd": pd.virtual_id, "max_wr": max_wr, "limit": limit}, {"max_wr": max_wr, "limit": limit},
            )

    def create_qp(
        self,
        pd: ShadowDescriptor,
        send_cq: ShadowDescriptor,
        recv_cq: ShadowDescriptor,
        srq: ShadowDescriptor | None = None,
        max_send_wr: int = 64,
        max_recv_wr: int = 64,
    ) -> ShadowDescriptor:
        with self._lock:
            pd = self._live(pd, ResourceKind.PD)
            send_cq = self._live(send_cq, ResourceKind.CQ)
            recv_cq = self._live(recv_cq, ResourceKind.CQ)
            if srq is not None:
                srq = self._live(srq, ResourceKind.SRQ)
            with self._virtual_errors(pd):
                real = self.engine.create_qp(
                    pd.real_ref, send_cq.real_ref, recv_cq.real_ref,
                    srq.real_ref if srq is not None else None, max_send_wr, max_recv_wr,
                )
            vqpn = self._next_virtual(IdClass.QP_NUM, real.qp_num)
            try:
                self._claim(IdClass.QP_NUM, vqpn, real.qp_num)
            except VirtualIdConflict:
                self.engine.destroy(real)
                raise
            params = {
                "pd": pd.virtual_id,
                "send_cq": send_cq.virtual_id,
                "recv_cq": recv_cq.virtual_id,
                "srq": srq.virtual_id if srq is not None else None,
                "max_send_wr": max_send_wr,
                "max_recv_wr": max_recv_wr,
            }
            ctx = self._shadows[(ResourceKind.CTX, pd.ctx)]
            visible = {
                "qp_num": vqpn,
                "lid": ctx.visible["lid"],
                "state": int(QpState.RESET),
                "remote_lid": None,
                "remote_qp_num": None,
                "srq": params["srq"],
            }
            shadow = self._remember(ResourceKind.QP, real, pd.ctx, params, visible)
            self._qp_by_vqpn[vqpn] = shadow
            return shadow

    def _remote_lid(self, vlid: int) -> int:
        if vlid in self.directory.lids:
            return self.directory.lids[vlid]
        if self.identity_fallback:
            return vlid
        raise UnknownRemoteVirtualId(f"no published lid for virtual lid {vlid:#x}")

    def _remote_qp_num(self, vqpn: int) -> int:
        if vqpn in self.directory.qp_real:
            return self.directory.qp_real[vqpn]
        if self.identity_fallback:
            return vqpn
        raise UnknownRemoteVirtualId(f"no published qp_num for virtual qp {vqpn:#x}")

    def _apply_modify(self, qp: ShadowDescriptor, transition: Transition) -> None:
        real = transition
        if transition.kind == TransitionKind.TO_RTR:
            real = Transition.to_rtr(
                self._remote_lid(transition.remote_lid), self._remote_qp_num(transition.remote_qp_num)
            )
        with self._virtual_errors(qp):
            self.engine.modify_qp(qp.real_ref, real)
        qp.visible["state"] = int(qp.real_ref.state)
        if transition.kind == TransitionKind.TO_RTR:
            qp.visible["remote_lid"] = transition.remote_lid
            qp.visible["remote_qp_num"] = transition.remote_qp_num

    def modify_qp(self, qp: ShadowDescriptor, transition: Transition) -> None:
        with self._lock:
            qp = self._live(qp, ResourceKind.QP)
            self._apply_modify(qp, transition)
            self.resources.record_modify(ModifyRecord(
                ResourceKind.QP, qp.virtual_id, transition.kind, transition.remote_lid, transition.remote_qp_num,
            ))

    def modify_srq(self, srq: ShadowDescriptor, limit: int) -> None:
        with self._lock:
            srq = self._live(srq, ResourceKind.SRQ)
            with self._virtual_errors(srq):
                self.engine.modify_srq(srq.real_ref, limit)
            srq.visible["limit"] = limit
            self.resources.record_modify(ModifyRecord(ResourceKind.SRQ, srq.virtual_id, srq_limit=limit))

    def query_port(self, ctx: ShadowDescriptor) -> PortAttributes:
        ctx = self._live(ctx, ResourceKind.CTX)
        return PortAttributes(lid=ctx.visible["lid"], port_index=ctx.visible["port_index"])

    def query_qp(self, qp: ShadowDescriptor) -> QpAttributes:
        qp = self._live(qp, ResourceKind.QP)
        return QpAttributes(
            qp.visible["qp_num"], QpState(qp.visible["state"]), qp.visible["remote_lid"], qp.visible["remote_qp_num"],
        )

    def destroy(self, shadow: ShadowDescriptor) -> None:
        with self._lock:
            shadow = self._live(shadow)
            with self._virtual_errors(shadow):
                self.engine.destroy(shadow.real_ref)
            shadow.live = False
            kind, vid = shadow.kind, shadow.virtual_id
            del self._shadows[(kind, vid)]
            self.table.handles(kind).discard(vid)
            match kind:
                case ResourceKind.QP:
                    self.table[IdClass.QP_NUM].discard(shadow.visible["qp_num"])
                    self._qp_by_vqpn.pop(shadow.visible["qp_num"], None)
                    self.wqes.drop_owner(vid, (QueueKind.SEND, QueueKind.RECV))
                case ResourceKind.SRQ:
                    self.wqes.drop_owner(vid, (QueueKind.SRQ,))
                case ResourceKind.MR:
                    pd = self._shadows.get((ResourceKind.PD, self._creation(shadow).params["pd"]))
                    self.table[IdClass.LKEY].discard(shadow.visible["lkey"])
                    if pd is not None:
                        self.table[IdClass.RKEY].discard((pd.visible["global_pd_uid"], shadow.visible["rkey"]))
                case ResourceKind.CQ:
                    self._vcq.pop(vid, None)
                case ResourceKind.PD:
                    self.table[IdClass.PD_UID].discard(shadow.visible["global_pd_uid"])
                case ResourceKind.CTX:
                    others = [s for s in self.shadows(ResourceKind.CTX) if s.visible["lid"] == shadow.visible["lid"]]
                    if not others:
                        self.table[IdClass.LID].discard(shadow.visible["lid"])
            self.resources.forget(kind, vid)

    def _creation(self, shadow: ShadowDescriptor) -> CreationRecord:
        for record in self.resources.creations:
            if (record.kind, record.virtual_id) == (shadow.kind, shadow.virtual_id):
                return record
        raise StaleHandle("no creation record", shadow.virtual_id)

    def read_memory(self, ctx: ShadowDescriptor, addr: int, length: int) -> bytes:
        ctx = self._live(ctx, ResourceKind.CTX)
        return self.engine.read_memory(ctx.real_ref, addr, length)

    def write_memory(self, ctx: ShadowDescriptor, addr: int, data: bytes) -> None:
        ctx = self._live(ctx, ResourceKind.CTX)
        self.engine.write_memory(ctx.real_ref, addr, data)

    # data-path wrappers

    def _real_lkey(self, vlkey: int) -> int:
        real = self.table[IdClass.LKEY].real(vlkey)
        return vlkey if real is None else real

    def _real_rkey(self, qp: ShadowDescriptor, vrkey: int) -> int:
        """local vqp -> remote vqp -> remote pd -> (vrkey, pd) -> rkey."""
        remote_vqpn = qp.visible["remote_qp_num"]
        pd_uid = self.directory.qp_pd.get(remote_vqpn)
        if pd_uid is None:
            if self.identity_fallback:
                return vrkey
            raise UnknownRemoteVirtualId(f"no protection domain published for qp {remote_vqpn}")
        rkey = self.directory.rkeys.get((vrkey, pd_uid))
        if rkey is None:
            if self.identity_fallback:
                return vrkey
            raise UnknownVrkey(f"no rkey published for vrkey {vrkey:#x} in pd {pd_uid:#x}")
        return rkey

    def _to_real(self, qp: ShadowDescriptor | None, wr: WorkRequest, inline: bytes | None = None) -> WorkRequest:
        sg_list = tuple(ScatterGather(s.addr, s.length, self._real_lkey(s.lkey)) for s in wr.sg_list)
        rkey = self._real_rkey(qp, wr.rkey) if wr.rkey is not None else None
        return replace(wr, sg_list=sg_list, rkey=rkey, inline_data=inline)

    def _capture_inline(self, qp: ShadowDescriptor, wr: WorkRequest) -> bytes | None:
        if not (wr.inline_flag and self.settings.capture_inline_payloads):
            return None
        ctx = self._shadows[(ResourceKind.CTX, qp.ctx)]
        return b"".join(self.engine.read_memory(ctx.real_ref, s.addr, s.length) for s in wr.sg_list)

    def _wrap_post_send(self, qp: ShadowDescriptor, wr: WorkRequest) -> None:
        with self._lock:
            qp = self._live(qp, ResourceKind.QP)
            inline = self._capture_inline(qp, wr)
            with self._virtual_errors(qp):
                self._native[qp.ctx]["post_send"](qp.real_ref, self._to_real(qp, wr, inline))
            self.wqes.add(QueueKind.SEND, qp.virtual_id, wr, inline)

    def _wrap_post_recv(self, qp: ShadowDescriptor, wr: WorkRequest) -> None:
        with self._lock:
            qp = self._live(qp, ResourceKind.QP)
            with self._virtual_errors(qp):
                self._native[qp.ctx]["post_recv"](qp.real_ref, self._to_real(None, wr))
            self.wqes.add(QueueKind.RECV, qp.virtual_id, wr)

    def _wrap_post_srq_recv(self, srq: ShadowDescriptor, wr: WorkRequest) -> None:
        with self._lock:
            srq = self._live(srq, ResourceKind.SRQ)
            with self._virtual_errors(srq):
                self._native[srq.ctx]["post_srq_recv"](srq.real_ref, self._to_real(None, wr))
            self.wqes.add(QueueKind.SRQ, srq.virtual_id, wr)

    def _wrap_poll_cq(self, cq: ShadowDescriptor, max_entries: int) -> list[CompletionEvent]:
        with self._lock:
            cq = self._live(cq, ResourceKind.CQ)
            private = self._vcq[cq.virtual_id]
            if private:
                return [private.popleft() for _ in range(min(max_entries, len(private)))]
            with self._virtual_errors(cq):
                events = self._native[cq.ctx]["poll_cq"](cq.real_ref, max_entries)
            return [self._absorb(event) for event in events]

    def _absorb(self, event: CompletionEvent) -> CompletionEvent:
        """Rewrite ``event`` to virtual ids and retire its logged work request."""
        vqpn = self.table[IdClass.QP_NUM].virtual(event.qp_num)
        if vqpn is None:
            return event
        event = replace(event, qp_num=vqpn)
        qp = self._qp_by_vqpn.get(vqpn)
        if qp is None:
            return event
        ok = event.status == WcStatus.SUCCESS
        if event.opcode in _RECV_OPCODES:
            srq = qp.visible["srq"]
            if srq is not None:
                self.wqes.remove(QueueKind.SRQ, srq, event.wr_id)
            else:
                self.wqes.remove(QueueKind.RECV, qp.virtual_id, event.wr_id)
            if ok:
                self.tally.recv_seen[self._qp_key(qp)] += 1
            return event
        record = self.wqes.remove(QueueKind.SEND, qp.virtual_id, event.wr_id)
        if record is None:
            return event
        retired = [record]
        if record.signaled:
            retired += self.wqes.prune_unsignaled(qp.virtual_id, record.index)
        if ok:
            consumed = sum(1 for r in retired if r.wr.opcode in RECV_CONSUMING)
            if consumed:
                self.tally.send_retired[self._remote_key(qp)] += consumed
        return event

    # checkpoint

    def drain_round(self) -> DrainRound:
        """Move every pending real completion into the private queues."""
        with self._lock:
            events = 0
            for cq in self.shadows(ResourceKind.CQ):
                poll = self._native[cq.ctx]["poll_cq"]
                while batch := poll(cq.real_ref, 64):
                    self._vcq[cq.virtual_id].extend(self._absorb(e) for e in batch)
                    events += len(batch)
            self.drained_events += events
            logger.debug("rank %d drain round: %d events", self.rank, events)
            return DrainRound(self.rank, events, dict(self.tally.recv_seen), dict(self.tally.send_retired))

    def retire_delivered(self, delivered: Mapping[tuple[int, int], int]) -> int:
        """Retire unsignaled sends the remote side has already received.

        ``delivered`` counts receive completions per receiving QP across every
        node. An unsignaled send never completes on its own, so without this it
        would stay logged and be posted a second time on restart. Retiring stops
        at the oldest signaled send still waiting for its completion.
        """
        with self._lock:
            retired = 0
            for qp in self.shadows(ResourceKind.QP):
                key = self._remote_key(qp)
                owed = delivered.get(key, 0) - self.tally.send_retired[key]
                for record in self.wqes.entries(QueueKind.SEND, qp.virtual_id):
                    if owed <= 0 or record.signaled:
                        break
                    if record.wr.opcode not in RECV_CONSUMING:
                        continue
                    self.wqes.discard(record)
                    self.tally.send_retired[key] += 1
                    owed -= 1
                    retired += 1
            if retired:
                logger.debug("rank %d retired %d delivered unsignaled sends", self.rank, retired)
            return retired

    def on_checkpoint(self, progress: Callable[[int], Any]) -> DrainReport:
        """Drain locally until a round comes back empty.

        ``progress(ticks)`` advances virtual time between rounds.
        """
        if self.settings.settle_ticks:
            progress(self.settings.settle_ticks)
        rounds = 0
        for rounds in range(1, self.settings.drain_max_rounds + 1):
            if self.drain_round().events == 0:
                break
            progress(self.settings.drain_interval_ticks)
        else:
            logger.warning("rank %d: drain budget of %d rounds exhausted", self.rank, rounds)
        return self.drain_report(rounds)

    def drain_report(self, rounds: int, unresolved: int = 0, in_flight_at_quiesce: int = 0) -> DrainReport:
        in_flight = self.engine.fabric.in_flight(self.node) if self.node is not None else 0
        return DrainReport(
            rank=self.rank,
            drained_events=sum(len(q) for q in self._vcq.values()),
            wqes_outstanding=len(self.wqes),
            in_flight_at_quiesce=in_flight_at_quiesce,
            in_flight_ignored=in_flight,
            rounds=rounds,
            unresolved=unresolved,
        )

    def on_resume(self) -> None:
        logger.info("rank %d resume: %d private completions kept", self.rank, sum(len(q) for q in self._vcq.values()))

    def pending_reposts(self) -> int:
        return self.wqes.pending_reposts()

    def private_depth(self, cq: ShadowDescriptor) -> int:
        return len(self._vcq.get(cq.virtual_id, ()))

    def memory_regions(self) -> list[MemoryRegionState]:
        ctx = next(iter(self.shadows(ResourceKind.CTX)), None)
        if ctx is None:
            return []
        spans = sorted({(mr.visible["base_addr"], mr.visible["length"]) for mr in self.shadows(ResourceKind.MR)})
        return [MemoryRegionState(base_addr=b, data=self.read_memory(ctx, b, n)) for b, n in spans]

    def drained_state(self) -> DrainedCqState:
        return DrainedCqState(events=[
            DrainedEventState(cq=cq, **{k: getattr(e, k) for k in ("wr_id", "byte_len", "qp_num", "imm", "error")},
                              status=int(e.status), opcode=int(e.opcode))
            for cq, queue in self._vcq.items()
            for e in queue
        ])

    def state(self) -> PluginState:
        return PluginState(
            rank=self.rank,
            n_ranks=self.n_ranks,
            policy=self.policy,
            restarted=self.restarted,
            tables=self.table.to_state(),
            directory=self.directory.to_state(),
            recv_seen=sorted((lid, qpn, n) for (lid, qpn), n in self.tally.recv_seen.items()),
            send_retired=sorted((lid, qpn, n) for (lid, qpn), n in self.tally.send_retired.items()),
            counters={str(k): v for k, v in self.counters.items()},
            hybrid_base=dict(self.hybrid_base),
        )

    # id exchange

    def published(self) -> dict[Namespace, dict[bytes, bytes]]:
        out: dict[Namespace, dict[bytes, bytes]] = {ns: {} for ns in Namespace}
        for qp in self.shadows(ResourceKind.QP):
            pd = self._shadows[(ResourceKind.PD, self._creation(qp).params["pd"])]
            vqpn = qp.visible["qp_num"]
            out[Namespace.QP_PD][U32.pack(vqpn)] = U64.pack(pd.visible["global_pd_uid"])
            out[Namespace.QP_REAL][U32.pack(vqpn)] = U32.pack(qp.real_ref.qp_num)
        for (pd_uid, vrkey), (_, rkey) in self.table[IdClass.RKEY].items():
            out[Namespace.VRKEY_PD_RKEY][RKEY_KEY.pack(vrkey, pd_uid)] = U32.pack(rkey)
        for vlid, lid in self.table[IdClass.LID].items():
            out[Namespace.LID][U32.pack(vlid)] = U32.pack(lid)
        return out

    async def exchange_ids(self, session: CoordinatorSessionProtocol) -> int:
        """Publish this process's ids, wait for everyone, load the directory.

        The lock is held only around local reads and writes, never across the
        barrier, so other threads can still call into this layer while peers
        are being waited for.
        """
        with self._lock:
            published = self.published()
        for namespace, entries in published.items():
            for key, value in entries.items():
                await session.publish(str(namespace), key, value)
        generation = await session.barrier()
        snapshots = {namespace: await session.subscribe(str(namespace)) for namespace in Namespace}
        with self._lock:
            loaded = sum(self.directory.load(namespace, entries) for namespace, entries in snapshots.items())
        logger.info("rank %d id exchange (barrier %d): %d directory entries", self.rank, generation, loaded)
        return loaded

    # restart

    def load(self, image: NodeImage) -> None:
        """Adopt the bookkeeping of a checkpoint image; no resources yet."""
        state = image.plugin
        self.rank = state.rank
        self.n_ranks = state.n_ranks
        self.policy = state.policy
        self.table = TranslationTable.from_state(state.tables)
        self.directory = RkeyDirectory.from_state(state.directory)
        self.tally = _Tally(
            Counter({(lid, qpn): n for lid, qpn, n in state.recv_seen}),
            Counter({(lid, qpn): n for lid, qpn, n in state.send_retired}),
        )
        self.counters = Counter(state.counters)
        self.hybrid_base = dict(state.hybrid_base)
        self.resources = ResourceLog.from_state(image.resource_log)
        self.wqes = WqeLog.from_state(image.wqe_log)
        self._vcq = {}
        for e in image.drained.events:
            self._vcq.setdefault(e.cq, deque()).append(CompletionEvent(
                e.wr_id, WcStatus(e.status), Opcode(e.opcode), e.byte_len, e.qp_num, e.imm, e.error,
            ))

    async def on_restart(
        self, image: NodeImage, node: NodeAddr, session: CoordinatorSessionProtocol
    ) -> RestartReport:
        with self._lock:
            self.load(image)
            self.restarted = True
            self.node = node
            recreated = self._replay_creations(image, node)
            self.directory = RkeyDirectory()
        loaded = await self.exchange_ids(session)
        with self._lock:
            self._check_directory()
            self._compute_strides()
            for record in self.resources.modifies:
                self._replay_modify(record)
            reposted = self._repost()
        logger.info(
            "rank %d restart on %s: %d resources, %d directory entries, %d reposted",
            self.rank, node, recreated, loaded, reposted,
        )
        return RestartReport(self.rank, recreated, reposted, loaded)

    def _replay_creations(self, image: NodeImage, node: NodeAddr) -> int:
        self._shadows.clear()
        self._qp_by_vqpn.clear()
        self._native.clear()
        restored_memory = False
        for record in self.resources.creations:
            p = record.params
            vid = record.virtual_id
            visible = dict(record.visible)
            match record.kind:
                case ResourceKind.CTX:
                    real = self.engine.open_device(node)
                    self.table[IdClass.LID].rebind(visible["lid"], real.lid)
                    ctx = vid
                case ResourceKind.PD:
                    real = self.engine.alloc_pd(self._real(ResourceKind.CTX, p["ctx"]))
                    self.table[IdClass.PD_UID].rebind(visible["global_pd_uid"], real.global_pd_uid)
                    ctx = p["ctx"]
                case ResourceKind.MR:
                    pd = self._shadows[(ResourceKind.PD, p["pd"])]
                    real = self.engine.reg_mr(pd.real_ref, p["base_addr"], p["length"], AccessFlag(p["access"]))
                    uid = pd.visible["global_pd_uid"]
                    self.table[IdClass.LKEY].rebind(visible["lkey"], real.lkey)
                    self.table[IdClass.RKEY].rebind((uid, visible["rkey"]), (uid, real.rkey))
                    ctx = pd.ctx
                case ResourceKind.CQ:
                    real = self.engine.create_cq(self._real(ResourceKind.CTX, p["ctx"]), p["capacity"])
                    self._vcq.setdefault(vid, deque())
                    ctx = p["ctx"]
                case ResourceKind.SRQ:
                    pd = self._shadows[(ResourceKind.PD, p["pd"])]
                    real = self.engine.create_srq(pd.real_ref, p["max_wr"], p["limit"])
                    visible["limit"] = p["limit"]
                    ctx = pd.ctx
                case ResourceKind.QP:
                    pd = self._shadows[(ResourceKind.PD, p["pd"])]
                    srq = self._real(ResourceKind.SRQ, p["srq"]) if p["srq"] is not None else None
                    real = self.engine.create_qp(
                        pd.real_ref, self._real(ResourceKind.CQ, p["send_cq"]), self._real(ResourceKind.CQ, p["recv_cq"]),
                        srq, p["max_send_wr"], p["max_recv_wr"],
                    )
                    self.table[IdClass.QP_NUM].rebind(visible["qp_num"], real.qp_num)
                    visible.update(state=int(QpState.RESET), remote_lid=None, remote_qp_num=None)
                    ctx = pd.ctx
            self.table.handles(record.kind).rebind(vid, real.handle)
            shadow = ShadowDescriptor(record.kind, vid, visible, real, ctx)
            self._shadows[(record.kind, vid)] = shadow
            if record.kind == ResourceKind.QP:
                self._qp_by_vqpn[visible["qp_num"]] = shadow
            if record.kind == ResourceKind.CTX:
                self._interpose(shadow)
                if not restored_memory:
                    for region in image.memory:
                        self.engine.write_memory(real, region.base_addr, region.data)
                    restored_memory = True
        return len(self.resources.creations)

    def _real(self, kind: ResourceKind, vid: int):
        return self._shadows[(kind, vid)].real_ref

    def _check_directory(self) -> None:
        missing = []
        for record in self.resources.modifies:
            if record.transition != TransitionKind.TO_RTR:
                continue
            if record.remote_qp_num not in self.directory.qp_real:
                missing.append(f"qp {record.remote_qp_num:#x}")
            if record.remote_qp_num not in self.directory.qp_pd:
                missing.append(f"pd of qp {record.remote_qp_num:#x}")
            if record.remote_lid not in self.directory.lids:
                missing.append(f"lid {record.remote_lid:#x}")
        if missing:
            raise RestartDirectoryIncomplete(f"rank {self.rank}: nothing published for " + ", ".join(missing))

    def _compute_strides(self) -> None:
        if self.policy != IdPolicy.PUBLISH_AFTER_RESTART:
            return
        for id_class in IdClass:
            base = self.table[id_class].max_virtual()
            if id_class in REMOTE_VISIBLE:
                base = max(base, self.directory.max_virtual(id_class))
            self.hybrid_base[str(id_class)] = base
            self.counters[f"strided:{id_class}"] = 0

    def _replay_modify(self, record: ModifyRecord) -> None:
        shadow = self._shadows.get((record.kind, record.virtual_id))
        if shadow is None:
            return
        if record.kind == ResourceKind.SRQ:
            self.engine.modify_srq(shadow.real_ref, record.srq_limit)
            shadow.visible["limit"] = record.srq_limit
            return
        self._apply_modify(shadow, Transition(record.transition, record.remote_lid, record.remote_qp_num))

    def _repost(self) -> int:
        entries = self.wqes.entries()
        for record in entries:
            slot = {QueueKind.SEND: "post_send", QueueKind.RECV: "post_recv", QueueKind.SRQ: "post_srq_recv"}[record.queue]
            kind = ResourceKind.SRQ if record.queue == QueueKind.SRQ else ResourceKind.QP
            owner = self._shadows[(kind, record.owner)]
            qp = owner if kind == ResourceKind.QP and record.queue == QueueKind.SEND else None
            with self._virtual_errors(owner):
                self._native[owner.ctx][slot](owner.real_ref, self._to_real(qp, record.wr, record.inline_payload))
            record.reposted = True
        return len(entries)
