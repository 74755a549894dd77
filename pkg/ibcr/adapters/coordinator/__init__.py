from ibcr.adapters.coordinator.server import CoordinatorClient
from ibcr.adapters.coordinator.server import CoordinatorServer
from ibcr.adapters.coordinator.session import InProcessHub
from ibcr.adapters.coordinator.session import InProcessSession
from ibcr.adapters.coordinator.state import Coordinator


__all__ = ["Coordinator", "CoordinatorClient", "CoordinatorServer", "InProcessHub", "InProcessSession"]
