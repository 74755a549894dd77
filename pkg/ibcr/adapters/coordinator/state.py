"""Coordinator state machine.

Transport-agnostic: the in-process session and the TCP server both drive one
``Coordinator``. Everything here is synchronous; waiting on a barrier is the
session's job.
"""

import itertools
import logging
from collections.abc import Callable
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

from ibcr.adapters.plugin.plugin import delivered_counts
from ibcr.adapters.plugin.plugin import unresolved_pairs
from ibcr.domain.errors import CheckpointAborted
from ibcr.domain.errors import CoordinatorError
from ibcr.domain.errors import DuplicateNode
from ibcr.domain.errors import PublishConflict
from ibcr.domain.errors import RegistrationClosed
from ibcr.domain.errors import UnknownNamespace
from ibcr.domain.models import CheckpointSummary
from ibcr.domain.models import DrainReport
from ibcr.domain.models import Namespace
from ibcr.domain.models import Phase
from ibcr.domain.ports import NodeAgentProtocol


logger = logging.getLogger(__name__)

_ALLOWED = {
    (Phase.RUNNING, Phase.QUIESCED),
    (Phase.QUIESCED, Phase.DRAINED),
    (Phase.DRAINED, Phase.WRITTEN),
    (Phase.WRITTEN, Phase.RUNNING),
    (Phase.RESTART_WAIT, Phase.RUNNING),
}
# only an aborted checkpoint takes these
_ROLLBACK = {(Phase.QUIESCED, Phase.RUNNING), (Phase.DRAINED, Phase.RUNNING)}
_ORDER = [Phase.QUIESCED, Phase.DRAINED, Phase.WRITTEN, Phase.RUNNING]


@dataclass
class ClientRecord:
    client_id: int
    node_id: int
    phase: Phase
    connection: Any = None


@dataclass(frozen=True)
class KvEntry:
    namespace: Namespace
    key: bytes
    value: bytes
    publisher: int


@dataclass(frozen=True)
class PhaseEvent:
    seq: int
    epoch: int
    client_id: int
    phase: Phase


class Coordinator:
    def __init__(self, expected: int = 0):
        self.expected = expected
        self.epoch = 1
        self.restarting = False
        self.clients: dict[int, ClientRecord] = {}
        self.event_log: list[PhaseEvent] = []
        self._ids = itertools.count(1)
        self._seq = itertools.count(1)
        self._closed = False
        self._kv: dict[Namespace, dict[bytes, KvEntry]] = {ns: {} for ns in Namespace}
        self._generation = 1
        self._arrived: set[int] = set()
        self._snapshots: dict[int, dict[Namespace, dict[bytes, bytes]]] = {}

    # registration and phases

    def register(self, node_id: int, connection: Any = None) -> int:
        if self._closed:
            raise RegistrationClosed("checkpoint in progress; registration closed")
        if any(c.node_id == node_id for c in self.clients.values()):
            raise DuplicateNode(f"node {node_id} already registered")
        client_id = next(self._ids)
        phase = Phase.RESTART_WAIT if self.restarting else Phase.RUNNING
        self.clients[client_id] = ClientRecord(client_id, node_id, phase, connection)
        self._log(client_id, phase)
        logger.info("registered node %d as client %d (%s)", node_id, client_id, phase)
        return client_id

    def client(self, client_id: int) -> ClientRecord:
        try:
            return self.clients[client_id]
        except KeyError:
            raise CoordinatorError(f"unknown client {client_id}") from None

    def set_phase(self, client_id: int, phase: Phase) -> None:
        record = self.client(client_id)
        if (record.phase, phase) not in _ALLOWED:
            raise CoordinatorError(f"client {client_id}: {record.phase} -> {phase} not allowed")
        record.phase = phase
        self._log(client_id, phase)

    def _log(self, client_id: int, phase: Phase) -> None:
        self.event_log.append(PhaseEvent(next(self._seq), self.epoch, client_id, phase))

    def phase_log(self, client_id: int) -> list[Phase]:
        return [e.phase for e in self.event_log if e.client_id == client_id]

    def audit_phase_log(self) -> list[str]:
        """Problems with per-client monotonicity or cross-client barrier order."""
        problems = []
        for client_id in self.clients:
            phases = self.phase_log(client_id)
            for a, b in itertools.pairwise(phases):
                if (a, b) not in _ALLOWED | _ROLLBACK:
                    problems.append(f"client {client_id}: {a} -> {b}")
        # Group events by checkpoint cycle: a client's k-th QUIESCED opens cycle k.
        cycle: dict[tuple[int, int], int] = {}
        spans: dict[tuple[int, int, Phase], tuple[int, int]] = {}
        for e in self.event_log:
            key = (e.epoch, e.client_id)
            if e.phase == Phase.QUIESCED:
                cycle[key] = cycle.get(key, 0) + 1
            k = cycle.get(key, 0)
            if k == 0 or e.phase not in _ORDER:
                continue
            first, last = spans.get((e.epoch, k, e.phase), (e.seq, e.seq))
            spans[(e.epoch, k, e.phase)] = (min(first, e.seq), max(last, e.seq))
        for (epoch, k, phase), (first, _) in spans.items():
            i = _ORDER.index(phase)
            previous = spans.get((epoch, k, _ORDER[i - 1])) if i else None
            if previous is not None and first < previous[1]:
                problems.append(f"epoch {epoch} checkpoint {k}: {phase} began before every client was {_ORDER[i - 1]}")
        return problems

    # key-value exchange

    def publish(self, client_id: int, namespace: str, key: bytes, value: bytes) -> None:
        ns = self._namespace(namespace)
        existing = self._kv[ns].get(key)
        if existing is not None:
            if existing.value != value:
                raise PublishConflict(f"{ns}: key {key.hex()} already published with a different value")
            return
        self._kv[ns][key] = KvEntry(ns, key, value, client_id)

    def subscribe(self, namespace: str) -> dict[bytes, bytes]:
        ns = self._namespace(namespace)
        if not self._snapshots:
            raise CoordinatorError("subscribe before any barrier completed")
        return dict(self._snapshots[max(self._snapshots)][ns])

    @staticmethod
    def _namespace(namespace: str) -> Namespace:
        try:
            return Namespace(namespace)
        except ValueError:
            raise UnknownNamespace(f"unknown namespace {namespace!r}") from None

    def barrier_arrive(self, client_id: int) -> tuple[int, bool]:
        """Record an arrival; return (generation, whether it completed)."""
        self.client(client_id)
        generation = self._generation
        self._arrived.add(client_id)
        expected = self.expected or len(self.clients)
        if len(self._arrived) < expected:
            return generation, False
        self._snapshots[generation] = {
            ns: {k: e.value for k, e in entries.items()} for ns, entries in self._kv.items()
        }
        self._arrived.clear()
        self._generation += 1
        logger.info("barrier %d complete (%d clients)", generation, expected)
        return generation, True

    def begin_epoch(self, expected: int) -> int:
        """Open a restart epoch: fresh store, registrations reopen."""
        self.epoch += 1
        self.expected = expected
        self.restarting = True
        self._closed = False
        self.clients.clear()
        self._kv = {ns: {} for ns in Namespace}
        self._arrived.clear()
        self._snapshots.clear()
        self._generation = 1
        logger.info("restart epoch %d expecting %d clients", self.epoch, expected)
        return self.epoch

    def close_registration(self) -> list[int]:
        self._closed = True
        return sorted(self.clients)

    # checkpoint

    def broadcast_checkpoint(
        self,
        agents: Mapping[int, NodeAgentProtocol],
        progress: Callable[[int], Any],
        *,
        drain_interval_ticks: int = 100,
        drain_max_rounds: int = 16,
        settle_ticks: int = 0,
        coordinated: bool = True,
        resume: bool = True,
        quiesce_timeout_ticks: int = 1000,
    ) -> CheckpointSummary:
        """Drive every client through QUIESCED, DRAINED, WRITTEN and (on resume) RUNNING.

        ``agents`` maps client id to the process being checkpointed. Each phase
        completes for all clients before the next starts. If any step fails,
        every client asked to quiesce is resumed and set back to RUNNING before
        ``CheckpointAborted`` propagates.
        """
        for client_id in agents:
            if self.client(client_id).phase != Phase.RUNNING:
                raise CoordinatorError(f"client {client_id} is {self.clients[client_id].phase}, not running")
        self._closed = True
        summary = CheckpointSummary(epoch=self.epoch)
        asked: set[int] = set()
        try:
            self._quiesce_all(agents, progress, drain_interval_ticks, quiesce_timeout_ticks, asked)
            if settle_ticks:
                progress(settle_ticks)
            if coordinated:
                reports = self._drain_together(agents, progress, drain_interval_ticks, drain_max_rounds)
            else:
                reports = self._drain_apart(agents, progress, drain_interval_ticks, drain_max_rounds)
            for cid, report in reports.items():
                summary.reports[agents[cid].rank] = report
                self.set_phase(cid, Phase.DRAINED)
            summary.unresolved = max((r.unresolved for r in reports.values()), default=0)
            for cid, agent in agents.items():
                path, size = self._step(cid, Phase.WRITTEN, lambda a=agent: a.write_image(self.epoch))
                summary.image_paths[agent.rank] = path
                summary.image_bytes[agent.rank] = size
            if resume:
                for cid, agent in agents.items():
                    self._step(cid, Phase.RUNNING, agent.resume)
        except Exception:
            self._roll_back({cid: agents[cid] for cid in agents if cid in asked})
            raise
        finally:
            self._closed = False
        logger.info(
            "checkpoint epoch %d: %d clients, %d drained events, unresolved %d",
            self.epoch, len(agents), sum(r.drained_events for r in summary.reports.values()), summary.unresolved,
        )
        return summary

    def _quiesce_all(self, agents, progress, interval: int, timeout_ticks: int, asked: set[int]) -> None:
        """Ask until every client acknowledges; give up after ``timeout_ticks``."""
        pending = list(agents)
        waited = 0
        while True:
            acked = []
            for cid in pending:
                asked.add(cid)
                if self._step(cid, Phase.QUIESCED, agents[cid].quiesce, record=False) is not None:
                    self.set_phase(cid, Phase.QUIESCED)
                    acked.append(cid)
            pending = [cid for cid in pending if cid not in acked]
            if not pending:
                return
            if waited >= timeout_ticks:
                raise CheckpointAborted(
                    f"clients {pending} did not acknowledge quiesce within {timeout_ticks} ticks", pending[0]
                )
            wait = min(interval, timeout_ticks - waited)
            progress(wait)
            waited += wait

    def _roll_back(self, agents: Mapping[int, NodeAgentProtocol]) -> None:
        for cid, agent in agents.items():
            try:
                agent.resume()
            except Exception as err:
                logger.error("client %d did not resume after the aborted checkpoint: %s", cid, err)
            record = self.clients.get(cid)
            if record is not None and record.phase != Phase.RUNNING:
                record.phase = Phase.RUNNING
                self._log(cid, Phase.RUNNING)
        logger.warning("checkpoint epoch %d aborted; %d clients running again", self.epoch, len(agents))

    def _step(self, client_id: int, phase: Phase, action: Callable[[], Any], *, record: bool = True) -> Any:
        try:
            result = action()
        except Exception as err:
            raise CheckpointAborted(f"client {client_id} failed entering {phase}: {err}", client_id) from err
        if record and phase != Phase.DRAINED:
            self.set_phase(client_id, phase)
        return result

    def _drain_together(self, agents, progress, interval, max_rounds) -> dict[int, DrainReport]:
        rounds, unresolved = 0, 0
        for rounds in range(1, max_rounds + 1):
            results = [self._step(cid, Phase.DRAINED, agent.drain_round) for cid, agent in agents.items()]
            events = sum(r.events for r in results)
            delivered = delivered_counts(results)
            retired = sum(
                self._step(cid, Phase.DRAINED, lambda a=agent: a.retire_delivered(delivered))
                for cid, agent in agents.items()
            )
            unresolved = unresolved_pairs(results) - retired
            if events == 0 and unresolved == 0:
                break
            logger.info("drain round %d: %d events, %d unresolved", rounds, events, unresolved)
            progress(interval)
        if unresolved:
            logger.warning("drain budget exhausted with %d unresolved completions", unresolved)
        return {
            cid: self._step(cid, Phase.DRAINED, lambda a=agent: a.finish_drain(rounds, unresolved))
            for cid, agent in agents.items()
        }

    def _drain_apart(self, agents, progress, interval, max_rounds) -> dict[int, DrainReport]:
        reports = {}
        for cid, agent in agents.items():
            rounds = 0
            for rounds in range(1, max_rounds + 1):
                if self._step(cid, Phase.DRAINED, agent.drain_round).events == 0:
                    break
                progress(interval)
            reports[cid] = self._step(cid, Phase.DRAINED, lambda a=agent, n=rounds: a.finish_drain(n, 0))
        return reports
