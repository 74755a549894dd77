from collections.abc import Mapping
from typing import Any
from typing import Protocol
from typing import runtime_checkable

from ibcr.domain.models import AccessFlag
from ibcr.domain.models import DrainReport
from ibcr.domain.models import DrainRound
from ibcr.domain.models import NodeAddr
from ibcr.domain.models import PortAttributes
from ibcr.domain.models import QpAttributes
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import RunReport
from ibcr.domain.models import Transition
from ibcr.domain.state import WorkloadStateImage
from ibcr.domain.workload import Transcript


@runtime_checkable
class VerbsProtocol(Protocol):
    """Creation and control calls; posts and polls go through the dispatch table."""

    def open_device(self, node: NodeAddr) -> Any: ...

    def alloc_pd(self, ctx: Any) -> Any: ...

    def reg_mr(self, pd: Any, base_addr: int, length: int, access: AccessFlag) -> Any: ...

    def create_cq(self, ctx: Any, capacity: int | None = None) -> Any: ...

    def create_srq(self, pd: Any, max_wr: int, limit: int = 0) -> Any: ...

    def create_qp(
        self,
        pd: Any,
        send_cq: Any,
        recv_cq: Any,
        srq: Any = None,
        max_send_wr: int = 64,
        max_recv_wr: int = 64,
    ) -> Any: ...

    def modify_qp(self, qp: Any, transition: Transition) -> None: ...

    def modify_srq(self, srq: Any, limit: int) -> None: ...

    def query_port(self, ctx: Any) -> PortAttributes: ...

    def query_qp(self, qp: Any) -> QpAttributes: ...

    def destroy(self, handle: Any) -> None: ...

    def resolve(self, kind: ResourceKind, handle: int) -> Any:
        """Return the live resource the application knows by ``handle``."""
        ...

    def read_memory(self, ctx: Any, addr: int, length: int) -> bytes: ...

    def write_memory(self, ctx: Any, addr: int, data: bytes) -> None: ...


@runtime_checkable
class CoordinatorSessionProtocol(Protocol):
    """One client's view of the id exchange: publish, barrier, subscribe."""

    client_id: int

    async def publish(self, namespace: str, key: bytes, value: bytes) -> None: ...

    async def barrier(self) -> int:
        """Wait for every expected client; return the barrier generation."""
        ...

    async def subscribe(self, namespace: str) -> dict[bytes, bytes]:
        """Snapshot of ``namespace`` as of the last completed barrier."""
        ...


@runtime_checkable
class NodeAgentProtocol(Protocol):
    """What the coordinator drives on each process during a checkpoint."""

    rank: int

    def quiesce(self) -> int | None:
        """Park the application and stop new sends.

        Returns the frames in flight, or None when the process is not quiesced yet.
        """
        ...

    def drain_round(self) -> DrainRound: ...

    def retire_delivered(self, delivered: Mapping[tuple[int, int], int]) -> int:
        """Retire logged sends that ``delivered`` shows arrived; return how many."""
        ...

    def finish_drain(self, rounds: int, unresolved: int) -> DrainReport: ...

    def write_image(self, epoch: int) -> tuple[str, int]:
        """Persist the image; return (path, bytes written)."""
        ...

    def resume(self) -> None: ...


@runtime_checkable
class WorkloadProtocol(Protocol):
    """One rank's traffic generator, stepped by the cluster harness."""

    rank: int
    bytes_sent: int
    bytes_received: int

    def peers(self) -> list[int]: ...

    def setup(self, verbs: VerbsProtocol, node: NodeAddr) -> dict[int, Any]:
        """Create resources; return what each peer needs to connect to us."""
        ...

    def connect(self, remote: dict[int, Any]) -> None: ...

    def step(self) -> bool:
        """Poll and post whatever the protocol allows; True if anything happened."""
        ...

    @property
    def done(self) -> bool: ...

    @property
    def started(self) -> int:
        """Iterations this rank has begun posting."""
        ...

    def transcript(self) -> Transcript: ...

    def state(self) -> WorkloadStateImage: ...

    def restore(self, verbs: VerbsProtocol, state: WorkloadStateImage) -> None: ...


@runtime_checkable
class ReportSinkProtocol(Protocol):
    async def __call__(self, report: RunReport) -> RunReport: ...

    async def aclose(self) -> None: ...
