from ibcr.adapters.fabric.fabric import Connection
from ibcr.adapters.fabric.fabric import Fabric
from ibcr.adapters.fabric.stream import StreamLink


__all__ = ["Connection", "Fabric", "StreamLink"]
