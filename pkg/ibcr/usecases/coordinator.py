import logging
import sys
from dataclasses import dataclass

from ibcr.adapters.coordinator import Coordinator
from ibcr.adapters.coordinator import CoordinatorServer
from ibcr.adapters.coordinator.server import split_address
from ibcr.domain.config import load_settings
from ibcr.domain.settings import AppSettings


logger = logging.getLogger(__name__)


@dataclass
class CoordinatorUsecase:
    """Serve the coordinator protocol until cancelled."""

    app_config: AppSettings | None = None

    def __post_init__(self):
        if self.app_config is None:
            self.app_config = load_settings(sys.argv)
        settings = self.app_config.coordinator
        self.server = CoordinatorServer(Coordinator(expected=settings.expect), timeout=settings.timeout_secs)

    async def start(self) -> tuple[str, int]:
        host, port = split_address(self.app_config.coordinator.listen)
        return await self.server.start(host, port)

    async def run(self) -> None:
        await self.start()
        try:
            await self.server.serve_forever()
        finally:
            await self.server.close()
            logger.info("coordinator stopped")
