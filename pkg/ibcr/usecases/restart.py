import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import orjson
from pydantic import ValidationError

from ibcr.adapters.image import read_image
from ibcr.adapters.persistence import SqlitePersistence
from ibcr.domain.config import load_settings
from ibcr.domain.errors import CorruptImage
from ibcr.domain.errors import IbcrError
from ibcr.domain.errors import ImageMissing
from ibcr.domain.models import CheckpointSummary
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import Outcome
from ibcr.domain.models import RunReport
from ibcr.domain.models import TransportMode
from ibcr.domain.ports import ReportSinkProtocol
from ibcr.domain.settings import AppSettings
from ibcr.domain.state import NodeImage
from ibcr.domain.state import RunManifest
from ibcr.domain.validation import ConfigError
from ibcr.domain.workload import WorkloadSpec
from ibcr.usecases.harness import MANIFEST
from ibcr.usecases.harness import Cluster
from ibcr.usecases.harness import consolidated
from ibcr.usecases.harness import image_name


logger = logging.getLogger(__name__)


def write_manifest(
    image_dir: Path,
    cluster: Cluster,
    summary: CheckpointSummary,
    reference_digests: list[str],
) -> Path:
    settings = cluster.settings
    manifest = RunManifest(
        spec=cluster.spec.to_dict(),
        ranks=len(cluster.placement),
        epoch=summary.epoch,
        mode=str(settings.fabric.mode),
        placement=[(a.node_id, a.port_index) for a in cluster.placement],
        images=[image_name(r) for r in range(len(cluster.placement))],
        reference_digests=reference_digests,
        plugin=settings.plugin.model_dump(mode="json"),
        fabric=settings.fabric.model_dump(mode="json"),
        engine=settings.engine.model_dump(mode="json"),
    )
    path = image_dir / MANIFEST
    path.write_bytes(orjson.dumps(manifest.model_dump(mode="json"), option=orjson.OPT_INDENT_2))
    logger.info("manifest for %d ranks written to %s", manifest.ranks, path)
    return path


def read_manifest(image_dir: Path) -> RunManifest:
    path = image_dir / MANIFEST
    try:
        return RunManifest.model_validate_json(path.read_bytes())
    except FileNotFoundError:
        raise ImageMissing(f"no {MANIFEST} in {image_dir}") from None
    except ValidationError as err:
        raise CorruptImage(f"{path}: {err}") from err


def read_images(image_dir: Path, manifest: RunManifest, where: list[NodeAddr]) -> list[NodeImage]:
    """Every rank's image, rebound to its new endpoint."""
    return [read_image(image_dir / name, rebind_to=where[r]) for r, name in enumerate(manifest.images)]


async def restart_cluster(
    cluster: Cluster,
    images: list[NodeImage],
    where: list[NodeAddr],
    mode: TransportMode,
    report: RunReport,
) -> None:
    """Restart from ``images``, fill the restart columns of ``report``, then finish the workload."""
    started = time.perf_counter()
    restarts = await cluster.restart(images, where, mode)
    report.reposted = sum(r.reposted for r in restarts)
    report.restart_time_ticks = cluster.settle_reposts()
    report.restart_wall_ms = (time.perf_counter() - started) * 1000
    cluster.run()


def conclude(report: RunReport, cluster: Cluster) -> RunReport:
    report.digests = cluster.digests()
    report.bytes_sent = sum(w.bytes_sent for w in cluster.workloads)
    report.bytes_received = sum(w.bytes_received for w in cluster.workloads)
    report.outcome = Outcome.MATCH if report.digests == report.reference_digests else Outcome.MISMATCH
    if report.outcome == Outcome.MISMATCH:
        bad = [r for r, (a, b) in enumerate(zip(report.digests, report.reference_digests)) if a != b]
        report.reason = f"transcripts differ on ranks {bad}"
    return report


async def persist(sink: ReportSinkProtocol | None, report: RunReport) -> None:
    if sink is None:
        return
    try:
        await sink(report)
    finally:
        await sink.aclose()


@dataclass
class RestartUsecase:
    """Finish a checkpointed computation from its image directory."""

    image_dir: str
    app_config: AppSettings | None = None
    sink: ReportSinkProtocol | None = None

    def __post_init__(self):
        if self.app_config is None:
            self.app_config = load_settings(sys.argv)
        if self.sink is None and self.app_config.report.database:
            self.sink = SqlitePersistence(self.app_config.report)

    def placement(self, manifest: RunManifest) -> list[NodeAddr]:
        hosts = self.app_config.workload.consolidate
        if hosts is not None:
            return consolidated(manifest.ranks, hosts)
        return [NodeAddr(node_id, port) for node_id, port in manifest.placement]

    def settings_for(self, manifest: RunManifest) -> AppSettings:
        """The checkpointed run's plugin, fabric and engine settings under any explicit overrides."""
        try:
            return self.app_config.with_snapshot(
                plugin=manifest.plugin, fabric=manifest.fabric, engine=manifest.engine
            )
        except ValidationError as err:
            raise ConfigError(f"manifest settings in {self.image_dir}: {err}") from err

    async def run(self) -> RunReport:
        directory = Path(self.image_dir)
        manifest = read_manifest(directory)
        spec = WorkloadSpec.from_dict(manifest.spec)
        settings = self.settings_for(manifest)
        mode = settings.fabric.mode
        report = RunReport(
            workload=str(spec.name),
            ranks=manifest.ranks,
            action="restart",
            reference_digests=list(manifest.reference_digests),
            image_dir=str(directory),
        )
        where = self.placement(manifest)
        images = read_images(directory, manifest, where)
        logger.info("restarting %s: %d ranks from %s over %s", spec.name, manifest.ranks, directory, mode)
        cluster = Cluster(settings, spec, image_dir=directory)
        try:
            await restart_cluster(cluster, images, where, mode, report)
            conclude(report, cluster)
        except IbcrError as err:
            logger.error("restart from %s failed: %s", directory, err)
            report.outcome = Outcome.ERROR
            report.reason = f"{type(err).__name__}: {err}"
        finally:
            cluster.close()
        await persist(self.sink, report)
        return report
