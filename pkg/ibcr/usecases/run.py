import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from ibcr.adapters.persistence import SqlitePersistence
from ibcr.domain.config import load_settings
from ibcr.domain.errors import IbcrError
from ibcr.domain.models import Action
from ibcr.domain.models import CheckpointSummary
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Outcome
from ibcr.domain.models import RunReport
from ibcr.domain.models import TransportMode
from ibcr.domain.ports import ReportSinkProtocol
from ibcr.domain.settings import AppSettings
from ibcr.domain.workload import WorkloadSpec
from ibcr.usecases.harness import Cluster
from ibcr.usecases.harness import consolidated
from ibcr.usecases.harness import placement
from ibcr.usecases.restart import conclude
from ibcr.usecases.restart import persist
from ibcr.usecases.restart import read_images
from ibcr.usecases.restart import read_manifest
from ibcr.usecases.restart import restart_cluster
from ibcr.usecases.restart import write_manifest


logger = logging.getLogger(__name__)


async def reference_digests(settings: AppSettings, spec: WorkloadSpec, where: list[NodeAddr]) -> list[str]:
    """Digests of an uninterrupted run straight on the engine."""
    cluster = Cluster(settings, spec, interposed=False)
    try:
        await cluster.launch(where)
        cluster.run()
        return cluster.digests()
    finally:
        cluster.close()


def restart_target(settings: AppSettings, n_ranks: int, where: list[NodeAddr]) -> tuple[list[NodeAddr], TransportMode]:
    match settings.workload.action:
        case Action.RESTART_MIGRATE:
            return where, TransportMode.STREAM
        case Action.RESTART_CONSOLIDATE:
            return consolidated(n_ranks, settings.workload.consolidate), settings.fabric.mode
        case _:
            return where, settings.fabric.mode


@dataclass
class RunUsecase:
    """Reference pass, then the requested pass, then a digest comparison."""

    app_config: AppSettings | None = None
    sink: ReportSinkProtocol | None = None

    def __post_init__(self):
        if self.app_config is None:
            self.app_config = load_settings(sys.argv)
        if self.sink is None and self.app_config.report.database:
            self.sink = SqlitePersistence(self.app_config.report)

    async def run(self) -> RunReport:
        w = self.app_config.workload
        spec = w.spec()
        spec.check_ranks(w.ranks)
        report = RunReport(
            workload=str(spec.name), ranks=w.ranks, action=str(w.action) if w.action else None
        )
        try:
            await self._run(spec, report)
        except IbcrError as err:
            logger.error("%s run failed: %s", spec.name, err)
            report.outcome = Outcome.ERROR
            report.reason = f"{type(err).__name__}: {err}"
        await persist(self.sink, report)
        return report

    async def _run(self, spec: WorkloadSpec, report: RunReport) -> None:
        cfg = self.app_config
        w = cfg.workload
        where = placement(w.nodes, w.procs_per_node)
        report.reference_digests = await reference_digests(cfg, spec, where)

        restarting = w.action not in (None, Action.RESUME)
        image_dir = Path(cfg.image.ckpt_dir) if restarting else None
        cluster = Cluster(cfg, spec, image_dir=image_dir)
        try:
            await cluster.launch(where)
            if w.action is None:
                cluster.run()
                conclude(report, cluster)
                return

            cluster.run_to(w.ckpt_at)
            started = time.perf_counter()
            summary = cluster.checkpoint(resume=not restarting)
            report.ckpt_wall_ms = (time.perf_counter() - started) * 1000
            self._checkpoint_columns(report, summary)

            if violations := cluster.violations():
                report.outcome = Outcome.ERROR
                report.reason = f"{len(violations)} work requests missing from the log: {violations[0]}"
                return
            if not restarting:
                cluster.run()
                conclude(report, cluster)
                return
            if summary.unresolved:
                report.outcome = Outcome.ERROR
                report.reason = (
                    f"drain left {summary.unresolved} completions unaccounted for after "
                    f"{cfg.plugin.drain_max_rounds} rounds; restarting would lose them"
                )
                return

            report.image_dir = str(image_dir)
            write_manifest(image_dir, cluster, summary, report.reference_digests)
            manifest = read_manifest(image_dir)
            target, mode = restart_target(cfg, len(where), where)
            images = read_images(image_dir, manifest, target)
            await restart_cluster(cluster, images, target, mode, report)
            conclude(report, cluster)
        finally:
            cluster.close()

    @staticmethod
    def _checkpoint_columns(report: RunReport, summary: CheckpointSummary) -> None:
        ranks = sorted(summary.reports)
        report.ckpt_time_ticks = summary.ckpt_ticks
        report.drained_event_counts = [summary.reports[r].drained_events for r in ranks]
        report.image_sizes = [summary.image_bytes[r] for r in ranks]
        report.in_flight_at_quiesce = max((summary.reports[r].in_flight_at_quiesce for r in ranks), default=0)
        report.drain_unresolved = summary.unresolved
        logger.info(
            "checkpoint took %d ticks, %d bytes of images",
            summary.ckpt_ticks, sum(report.image_sizes),
        )
