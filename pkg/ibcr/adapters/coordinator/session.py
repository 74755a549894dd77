import asyncio
import logging

from ibcr.adapters.coordinator.state import Coordinator
from ibcr.domain.errors import RestartAborted


logger = logging.getLogger(__name__)


class InProcessHub:
    """Async barrier waits on top of a ``Coordinator`` shared by one event loop.

    ``timeout`` is in seconds; None waits forever, which keeps deterministic
    in-process runs independent of wall-clock time.
    """

    def __init__(self, coordinator: Coordinator, timeout: float | None = None):
        self.coordinator = coordinator
        self.timeout = timeout
        self._released: dict[tuple[int, int], asyncio.Event] = {}

    def session(self, client_id: int) -> "InProcessSession":
        return InProcessSession(self, client_id)

    def register(self, node_id: int) -> "InProcessSession":
        return self.session(self.coordinator.register(node_id))

    async def barrier(self, client_id: int) -> int:
        generation, complete = self.coordinator.barrier_arrive(client_id)
        event = self._released.setdefault((self.coordinator.epoch, generation), asyncio.Event())
        if complete:
            event.set()
            return generation
        try:
            await asyncio.wait_for(event.wait(), self.timeout)
        except TimeoutError:
            raise RestartAborted(
                f"barrier {generation}: client {client_id} gave up after {self.timeout}s"
            ) from None
        return generation


class InProcessSession:
    def __init__(self, hub: InProcessHub, client_id: int):
        self.hub = hub
        self.client_id = client_id

    async def publish(self, namespace: str, key: bytes, value: bytes) -> None:
        self.hub.coordinator.publish(self.client_id, namespace, key, value)

    async def barrier(self) -> int:
        return await self.hub.barrier(self.client_id)

    async def subscribe(self, namespace: str) -> dict[bytes, bytes]:
        return self.hub.coordinator.subscribe(namespace)
