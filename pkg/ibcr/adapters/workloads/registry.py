from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import field

from ibcr.adapters.workloads.base import Workload
from ibcr.adapters.workloads.ping_pong import PingPong
from ibcr.adapters.workloads.rdma_stream import RdmaStream
from ibcr.adapters.workloads.ring import RingExchange
from ibcr.domain.models import WorkloadName
from ibcr.domain.validation import SpecError
from ibcr.domain.workload import WorkloadSpec


WorkloadFactory = Callable[[WorkloadSpec, int, int], Workload]


@dataclass
class WorkloadRegistry:
    """Builds one workload instance per rank from a factory keyed by name."""

    factories: dict[WorkloadName, WorkloadFactory] = field(
        default_factory=lambda: {
            WorkloadName.PING_PONG: PingPong,
            WorkloadName.RDMA_STREAM: RdmaStream,
            WorkloadName.RING_EXCHANGE: RingExchange,
        }
    )

    def get(self, name: WorkloadName | str) -> WorkloadFactory | None:
        try:
            return self.factories.get(WorkloadName(name))
        except ValueError:
            return None

    def build(self, spec: WorkloadSpec, n_ranks: int) -> list[Workload]:
        factory = self.get(spec.name)
        if factory is None:
            raise SpecError(f"unknown workload {spec.name!r}")
        spec.check_ranks(n_ranks)
        return [factory(spec, rank, n_ranks) for rank in range(n_ranks)]
