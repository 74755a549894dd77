from ibcr.adapters.workloads.base import PeerInfo
from ibcr.adapters.workloads.base import Workload
from ibcr.adapters.workloads.ping_pong import PingPong
from ibcr.adapters.workloads.rdma_stream import RdmaStream
from ibcr.adapters.workloads.registry import WorkloadRegistry
from ibcr.adapters.workloads.ring import RingExchange


__all__ = ["PeerInfo", "PingPong", "RdmaStream", "RingExchange", "Workload", "WorkloadRegistry"]
