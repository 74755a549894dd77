from datetime import UTC
from datetime import datetime
from uuid import uuid4

from sqlalchemy import JSON
from sqlalchemy import Column
from sqlmodel import Field
from sqlmodel import SQLModel

from ibcr.domain.models import RunReport


class RunReportORM(SQLModel, table=True):
    __tablename__ = "run_reports"

    id: str = Field(default_factory=lambda: str(uuid4()), primary_key=True)
    created_at: datetime = Field(default_factory=lambda: datetime.now(UTC), nullable=False)
    workload: str = Field(nullable=False, index=True)
    ranks: int = Field(nullable=False)
    action: str = Field(nullable=False, default="", index=True)
    outcome: str = Field(nullable=False, index=True)
    digests: list[str] = Field(sa_column=Column(JSON, nullable=False))
    reference_digests: list[str] = Field(sa_column=Column(JSON, nullable=False))
    ckpt_time_ticks: int = Field(nullable=False, default=0)
    restart_time_ticks: int = Field(nullable=False, default=0)
    drained_event_counts: list[int] = Field(sa_column=Column(JSON, nullable=False))
    image_sizes: list[int] = Field(sa_column=Column(JSON, nullable=False))
    drain_unresolved: int = Field(nullable=False, default=0)
    reason: str = Field(nullable=False, default="")

    @staticmethod
    def from_report(report: RunReport) -> "RunReportORM":
        """
        Convert a RunReport to a RunReportORM instance.
        """
        return RunReportORM(
            workload=report.workload,
            ranks=report.ranks,
            action=report.action or "",
            outcome=str(report.outcome),
            digests=list(report.digests),
            reference_digests=list(report.reference_digests),
            ckpt_time_ticks=report.ckpt_time_ticks,
            restart_time_ticks=report.restart_time_ticks,
            drained_event_counts=list(report.drained_event_counts),
            image_sizes=list(report.image_sizes),
            drain_unresolved=report.drain_unresolved,
            reason=report.reason,
        )
