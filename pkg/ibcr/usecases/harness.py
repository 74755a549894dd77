"""Cluster harness.

Owns one fabric and drives every rank of a workload over it: setup, lockstep
stepping in virtual time, coordinated checkpoints and restarts from images.
Ranks are stepped round-robin from one thread; when no rank can move, virtual
time jumps to the next scheduled delivery.
"""

import logging
from collections import Counter
from collections.abc import Awaitable
from collections.abc import Callable
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from ibcr.adapters.asyncio import first_error
from ibcr.adapters.asyncio import run_limited
from ibcr.adapters.coordinator import Coordinator
from ibcr.adapters.coordinator import CoordinatorClient
from ibcr.adapters.coordinator import InProcessHub
from ibcr.adapters.fabric import Fabric
from ibcr.adapters.image import encode_image
from ibcr.adapters.image import write_image
from ibcr.adapters.plugin import CrPlugin
from ibcr.adapters.verbs import VerbsEngine
from ibcr.adapters.workloads import Workload
from ibcr.adapters.workloads import WorkloadRegistry
from ibcr.domain.errors import WorkloadStalled
from ibcr.domain.models import CheckpointSummary
from ibcr.domain.models import DrainReport
from ibcr.domain.models import DrainRound
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Phase
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import RestartReport
from ibcr.domain.models import TransportMode
from ibcr.domain.ports import CoordinatorSessionProtocol
from ibcr.domain.ports import NodeAgentProtocol
from ibcr.domain.settings import AppSettings
from ibcr.domain.state import NodeImage
from ibcr.domain.validation import SpecError
from ibcr.domain.workload import WorkloadSpec


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def image_name(rank: int) -> str:
    return f"rank-{rank}.img"


def placement(nodes: int, procs_per_node: int) -> list[NodeAddr]:
    """Rank r runs on host r // procs_per_node, port r % procs_per_node."""
    return [NodeAddr(r // procs_per_node, r % procs_per_node) for r in range(nodes * procs_per_node)]


def consolidated(n_ranks: int, hosts: int) -> list[NodeAddr]:
    """Round-robin ranks onto ``hosts`` host slots, one port per co-located rank."""
    if hosts < 1:
        raise SpecError("consolidation needs at least one host")
    return [NodeAddr(r % hosts, r // hosts) for r in range(n_ranks)]


def audit_bookkeeping(plugin: CrPlugin) -> list[str]:
    """Work requests the engine still holds that the plugin's log does not know about."""
    problems = []
    engine = plugin.engine
    log = plugin.wqes
    owners = [(qp, (QueueKind.SEND, QueueKind.RECV)) for qp in plugin.shadows(ResourceKind.QP)]
    owners += [(srq, (QueueKind.SRQ,)) for srq in plugin.shadows(ResourceKind.SRQ)]
    for shadow, queues in owners:
        for queue in queues:
            missing = Counter(engine.queued_wr_ids(shadow.real_ref, queue)) - Counter(
                log.wr_ids(queue, shadow.virtual_id)
            )
            for wr in sorted(missing):
                problems.append(f"rank {plugin.rank} {shadow.kind} {shadow.virtual_id:#x} {queue}: wr {wr:#x} not logged")
    return problems


class NodeAgent(NodeAgentProtocol):
    """One rank as the coordinator sees it during a checkpoint."""

    def __init__(
        self,
        rank: int,
        node: NodeAddr,
        fabric: Fabric,
        plugin: CrPlugin,
        workload: Workload,
        image_dir: Path | None = None,
        compress: bool = True,
    ):
        self.rank = rank
        self.node = node
        self.fabric = fabric
        self.plugin = plugin
        self.workload = workload
        self.image_dir = image_dir
        self.compress = compress
        self.in_flight_at_quiesce = 0
        self.violations: list[str] = []
        self.encoded: bytes = b""

    def quiesce(self) -> int:
        self.in_flight_at_quiesce = self.fabric.quiesce(self.node)
        self.violations += audit_bookkeeping(self.plugin)
        return self.in_flight_at_quiesce

    def drain_round(self) -> DrainRound:
        return self.plugin.drain_round()

    def retire_delivered(self, delivered: Mapping[tuple[int, int], int]) -> int:
        return self.plugin.retire_delivered(delivered)

    def finish_drain(self, rounds: int, unresolved: int) -> DrainReport:
        return self.plugin.drain_report(rounds, unresolved, self.in_flight_at_quiesce)

    def snapshot(self, epoch: int) -> NodeImage:
        return NodeImage(
            rank=self.rank,
            node_id=self.node.node_id,
            port_index=self.node.port_index,
            epoch=epoch,
            memory=self.plugin.memory_regions(),
            resource_log=self.plugin.resources.to_state(),
            wqe_log=self.plugin.wqes.to_state(),
            drained=self.plugin.drained_state(),
            plugin=self.plugin.state(),
            workload=self.workload.state(),
        )

    def write_image(self, epoch: int) -> tuple[str, int]:
        image = self.snapshot(epoch)
        if self.image_dir is None:
            self.encoded, stats = encode_image(image, self.compress)
            return "", stats.bytes_written
        path = self.image_dir / image_name(self.rank)
        stats = write_image(image, path, self.compress)
        return str(path), stats.bytes_written

    def resume(self) -> None:
        self.fabric.unquiesce(self.node)
        self.plugin.on_resume()


class Cluster:
    """Every rank of one workload over one fabric.

    With ``interposed=False`` the ranks talk to the engine directly; that is
    the reference run the checkpointed runs are compared against.
    """

    def __init__(
        self,
        settings: AppSettings,
        spec: WorkloadSpec,
        *,
        interposed: bool = True,
        image_dir: Path | None = None,
        registry: WorkloadRegistry | None = None,
        fabric: Fabric | None = None,
    ):
        self.settings = settings
        self.spec = spec
        self.interposed = interposed
        self.image_dir = image_dir
        self.registry = registry or WorkloadRegistry()
        self.fabric = fabric or Fabric(settings.fabric.to_config(spec.seed))
        self.coordinator = Coordinator()
        # in-process barriers wait forever; only the TCP server bounds them
        self.hub = InProcessHub(self.coordinator, timeout=None)
        self.engine: VerbsEngine | None = None
        self.placement: list[NodeAddr] = []
        self.workloads: list[Workload] = []
        self.plugins: list[CrPlugin] = []
        self.clients: list[int] = []
        self.agents: dict[int, NodeAgent] = {}

    def _engine(self, epoch: int) -> VerbsEngine:
        engine = self.settings.engine
        pinned = epoch > 1
        return VerbsEngine(
            self.fabric,
            epoch=epoch,
            memory_bytes=engine.memory_bytes,
            cq_capacity=engine.cq_capacity,
            id_tag=engine.id_tag if pinned else None,
            id_offset=engine.id_offset if pinned else 0,
        )

    def _adopt(self, plugins: list[CrPlugin], workloads: list[Workload]) -> None:
        self.plugins = plugins
        self.workloads = workloads
        self.agents = {
            cid: NodeAgent(
                rank, self.placement[rank], self.fabric, plugins[rank], workloads[rank],
                self.image_dir, self.settings.image.compress,
            )
            for rank, cid in enumerate(self.clients)
        }

    # id exchange

    async def _each_rank(
        self, call: Callable[[int, CoordinatorSessionProtocol], Awaitable[Any]]
    ) -> list[Any]:
        """Run ``call(rank, session)`` for every rank at once and return the results.

        Sessions are in-process unless a coordinator address is configured, in
        which case every rank gets its own TCP client in a fresh remote epoch.
        """
        n = len(self.placement)
        address = self.settings.coordinator.address
        if not address:
            sessions = [self.hub.session(cid) for cid in self.clients]
            results = await run_limited(*(call(r, s) for r, s in enumerate(sessions)), limit=n)
        else:
            control = await CoordinatorClient.connect(address)
            clients: list[CoordinatorClient] = []
            try:
                epoch = await control.ctrl_restart(n)
                logger.info("remote coordinator %s opened epoch %d for %d ranks", address, epoch, n)
                for rank in range(n):
                    client = await CoordinatorClient.connect(address)
                    clients.append(client)
                    await client.register(rank)
                results = await run_limited(*(call(r, c) for r, c in enumerate(clients)), limit=n)
            finally:
                for client in [control, *clients]:
                    await client.close()
        if err := first_error(results):
            raise err
        return results

    # lifecycle

    async def launch(self, where: list[NodeAddr]) -> None:
        """Create every rank's resources on ``where`` and connect them."""
        n = len(where)
        self.placement = list(where)
        workloads = self.registry.build(self.spec, n)
        for addr in where:
            self.fabric.register(addr)
        self.engine = self._engine(epoch=1)
        if self.interposed:
            plugins = [
                CrPlugin(self.engine, rank=r, n_ranks=n, settings=self.settings.plugin) for r in range(n)
            ]
            self.clients = [self.coordinator.register(r) for r in range(n)]
        else:
            plugins = []
        infos = [w.setup(plugins[r] if plugins else self.engine, where[r]) for r, w in enumerate(workloads)]
        if plugins and plugins[0].policy == IdPolicy.GLOBALLY_UNIQUE_VIRTUAL:
            await self._each_rank(lambda r, session: plugins[r].exchange_ids(session))
        for r, w in enumerate(workloads):
            w.connect({peer: infos[peer][r] for peer in w.peers()})
        self._adopt(plugins, workloads)
        logger.info("launched %s on %d ranks (%s)", self.spec.name, n, "interposed" if plugins else "native")

    @property
    def done(self) -> bool:
        return all(w.done for w in self.workloads)

    def run(self, until: Callable[[], bool] | None = None) -> bool:
        """Step ranks until all are done; stop early once ``until()`` holds.

        Returns True when stopped by ``until``.
        """
        while not self.done:
            progressed = False
            for w in self.workloads:
                progressed |= w.step()
                if until is not None and until():
                    return True
            if progressed:
                continue
            due = self.fabric.next_due()
            if due is None:
                waiting = [w.rank for w in self.workloads if not w.done]
                raise WorkloadStalled(f"{self.spec.name}: ranks {waiting} wait on nothing in flight")
            self.fabric.advance(max(1, due - self.fabric.now))
        return False

    def run_to(self, iteration: int) -> None:
        """Run until rank 0 has posted work past ``iteration``."""
        if not self.run(lambda: self.workloads[0].started > iteration):
            raise SpecError(f"{self.spec.name} finished before iteration {iteration}")

    def checkpoint(self, resume: bool) -> CheckpointSummary:
        plugin = self.settings.plugin
        start = self.fabric.now
        summary = self.coordinator.broadcast_checkpoint(
            self.agents,
            self.fabric.advance,
            drain_interval_ticks=plugin.drain_interval_ticks,
            drain_max_rounds=plugin.drain_max_rounds,
            settle_ticks=plugin.settle_ticks,
            coordinated=plugin.drain_coordinated,
            resume=resume,
            quiesce_timeout_ticks=self.settings.coordinator.quiesce_timeout_ticks,
        )
        summary.ckpt_ticks = self.fabric.now - start
        return summary

    def violations(self) -> list[str]:
        return [v for agent in self.agents.values() for v in agent.violations]

    def images(self) -> list[bytes]:
        """In-memory images of the last checkpoint, by rank, when no directory is set."""
        return [agent.encoded for agent in sorted(self.agents.values(), key=lambda a: a.rank)]

    def teardown(self) -> None:
        """The processes die: their endpoints lose every connection and frame."""
        for addr in self.placement:
            if self.fabric.has_endpoint(addr):
                self.fabric.discard(addr)

    async def restart(
        self, images: list[NodeImage], where: list[NodeAddr], mode: TransportMode
    ) -> list[RestartReport]:
        """Recreate every rank from its image on ``where`` over transport ``mode``."""
        images = sorted(images, key=lambda i: i.rank)
        n = len(images)
        if [i.rank for i in images] != list(range(n)) or len(where) != n:
            raise SpecError(f"restart needs one image and one endpoint per rank, got {n} / {len(where)}")
        self.teardown()
        for addr in where:
            self.fabric.register(addr)
            self.fabric.teardown_and_rebind(addr, mode)
        self.placement = list(where)
        self.engine = self._engine(epoch=max(i.epoch for i in images) + 1)
        self.coordinator.begin_epoch(n)
        self.clients = [self.coordinator.register(image.rank) for image in images]
        plugins = [CrPlugin(self.engine, rank=r, n_ranks=n, settings=self.settings.plugin) for r in range(n)]
        reports = await self._each_rank(lambda r, session: plugins[r].on_restart(images[r], where[r], session))
        factory = self.registry.get(self.spec.name)
        workloads = []
        for image, plugin in zip(images, plugins, strict=True):
            workload = factory(self.spec, image.rank, n)
            workload.restore(plugin, image.workload)
            workloads.append(workload)
        self._adopt(plugins, workloads)
        for cid in self.clients:
            self.coordinator.set_phase(cid, Phase.RUNNING)
        logger.info("restarted %d ranks in epoch %d over %s", n, self.engine.epoch, mode)
        return reports

    def pending_reposts(self) -> int:
        return sum(p.pending_reposts() for p in self.plugins)

    def settle_reposts(self) -> int:
        """Run until every re-posted work request has retired; return the ticks it took."""
        start = self.fabric.now
        if self.pending_reposts():
            self.run(lambda: self.pending_reposts() == 0)
        return self.fabric.now - start

    def digests(self) -> list[str]:
        return [w.transcript().digest() for w in self.workloads]

    def close(self) -> None:
        self.fabric.close()
