"""Run reports land in SQLite through the async engine."""

import pytest
from sqlalchemy import text

from ibcr.adapters.persistence import SqlitePersistence
from ibcr.domain.models import Outcome
from ibcr.domain.models import RunReport
from ibcr.domain.settings import ReportSettings


def make_report() -> RunReport:
    return RunReport(
        workload="ping_pong",
        ranks=2,
        action="restart",
        outcome=Outcome.MATCH,
        digests=["aa", "bb"],
        reference_digests=["aa", "bb"],
        drained_event_counts=[1, 0],
        image_sizes=[100, 120],
    )


async def test_persists_run_report(tmp_path):
    db = tmp_path / "reports.db"
    persistence = SqlitePersistence(ReportSettings(database=str(db)))

    returned = await persistence(make_report())

    assert returned.outcome == Outcome.MATCH
    async with persistence.async_engine.connect() as conn:
        count = (await conn.execute(text("SELECT count(*) FROM run_reports"))).scalar()
        outcome = (await conn.execute(text("SELECT outcome FROM run_reports"))).scalar()
    assert count == 1
    assert outcome == "MATCH"
    await persistence.aclose()


def test_requires_database_path():
    with pytest.raises(ValueError):
        SqlitePersistence(ReportSettings(database=""))


@pytest.mark.asyncio
async def test_aclose_disposes_engine(tmp_path):
    p = SqlitePersistence(ReportSettings(database=str(tmp_path / "x.db")))
    await p.aclose()  # must not raise
