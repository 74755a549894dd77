from dataclasses import dataclass

from sqlalchemy.ext.asyncio import AsyncSession
from sqlalchemy.ext.asyncio import create_async_engine
from sqlalchemy.orm import sessionmaker
from sqlmodel import SQLModel
from sqlmodel import create_engine

from ibcr.domain.models import RunReport
from ibcr.domain.orm_models import RunReportORM
from ibcr.domain.ports import ReportSinkProtocol
from ibcr.domain.settings import ReportSettings


@dataclass
class SqlitePersistence(ReportSinkProtocol):
    settings: ReportSettings

    def __post_init__(self):
        if not self.settings.database:
            raise ValueError("SQLite database path must be provided in the configuration.")

        # async engine for runtime operations
        self.async_engine = create_async_engine(
            f"sqlite+aiosqlite:///{self.settings.database}",
            connect_args={"timeout": self.settings.timeout},
            echo=False,
        )
        # sync engine for migrations
        sync_engine = create_engine(
            f"sqlite:///{self.settings.database}",
            connect_args={"timeout": self.settings.timeout},
            echo=False,
        )

        # run auto-migration (create tables)
        SQLModel.metadata.create_all(sync_engine, checkfirst=True)
        sync_engine.dispose()

        self.make_session = sessionmaker(
            self.async_engine, class_=AsyncSession, expire_on_commit=False
        )

    async def aclose(self) -> None:
        await self.async_engine.dispose()

    async def __call__(self, report: RunReport) -> RunReport:
        async with self.make_session() as session:
            session.add(RunReportORM.from_report(report))
            await session.commit()
        return report
