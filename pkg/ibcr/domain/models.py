from dataclasses import dataclass
from dataclasses import field
from enum import IntEnum
from enum import IntFlag
from enum import StrEnum

from ibcr.domain.errors import InvalidWorkRequest


class TransportMode(StrEnum):
    IN_PROCESS = "sim"
    STREAM = "stream"


class FrameKind(IntEnum):
    SEND_DATA = 1
    RDMA_WRITE_DATA = 2
    RDMA_READ_REQ = 3
    RDMA_READ_RESP = 4
    DELIVERY_ACK = 5


class Opcode(IntEnum):
    SEND = 0
    RECV = 1
    RDMA_WRITE = 2
    RDMA_WRITE_WITH_IMM = 3
    RDMA_READ = 4
    RECV_RDMA_WITH_IMM = 5


SEND_OPCODES = frozenset({Opcode.SEND, Opcode.RDMA_WRITE, Opcode.RDMA_WRITE_WITH_IMM, Opcode.RDMA_READ})
RDMA_OPCODES = frozenset({Opcode.RDMA_WRITE, Opcode.RDMA_WRITE_WITH_IMM, Opcode.RDMA_READ})
# Sends that consume a receive WQE on the remote side.
RECV_CONSUMING = frozenset({Opcode.SEND, Opcode.RDMA_WRITE_WITH_IMM})


class WcStatus(IntEnum):
    SUCCESS = 0
    ERR = 1


class AckStatus(IntEnum):
    OK = 0
    REMOTE_NOT_READY = 1
    LENGTH_ERROR = 2
    REMOTE_ACCESS_ERROR = 3
    REMOTE_OP_ERROR = 4


class QpState(IntEnum):
    RESET = 0
    INIT = 1
    RTR = 2
    RTS = 3


class AccessFlag(IntFlag):
    LOCAL_WRITE = 1
    REMOTE_WRITE = 2
    REMOTE_READ = 4


class ResourceKind(StrEnum):
    CTX = "ctx"
    PD = "pd"
    MR = "mr"
    CQ = "cq"
    QP = "qp"
    SRQ = "srq"


class IdClass(StrEnum):
    CTX = "ctx"
    PD = "pd"
    MR = "mr"
    CQ = "cq"
    QP = "qp"
    SRQ = "srq"
    QP_NUM = "qp_num"
    LID = "lid"
    LKEY = "lkey"
    RKEY = "rkey"
    PD_UID = "pd_uid"


# Ids a peer can observe; everything else is process-local.
REMOTE_VISIBLE = frozenset({IdClass.QP_NUM, IdClass.LID, IdClass.RKEY})


class IdPolicy(StrEnum):
    REAL_EQUALS_VIRTUAL_AT_CREATE = "real_equals_virtual"
    GLOBALLY_UNIQUE_VIRTUAL = "globally_unique"
    PUBLISH_AFTER_RESTART = "publish_after_restart"


class TransitionKind(StrEnum):
    TO_INIT = "to_init"
    TO_RTR = "to_rtr"
    TO_RTS = "to_rts"


class QueueKind(StrEnum):
    SEND = "send"
    RECV = "recv"
    SRQ = "srq"


class Namespace(StrEnum):
    QP_PD = "qp_pd"
    VRKEY_PD_RKEY = "vrkey_pd_rkey"
    LID = "lid"
    QP_REAL = "qp_real"


class Phase(StrEnum):
    RUNNING = "running"
    QUIESCED = "quiesced"
    DRAINED = "drained"
    WRITTEN = "written"
    RESTART_WAIT = "restart_wait"


class Action(StrEnum):
    RESUME = "resume"
    RESTART = "restart"
    RESTART_MIGRATE = "restart_migrate"
    RESTART_CONSOLIDATE = "restart_consolidate"


class WorkloadName(StrEnum):
    PING_PONG = "ping_pong"
    RDMA_STREAM = "rdma_stream"
    RING_EXCHANGE = "ring_exchange"


class Outcome(StrEnum):
    MATCH = "MATCH"
    MISMATCH = "MISMATCH"
    ERROR = "ERROR"


@dataclass(frozen=True, order=True)
class NodeAddr:
    """One process endpoint: a host and an HCA port on it."""

    node_id: int
    port_index: int = 0

    def __post_init__(self):
        if self.node_id < 0 or self.port_index < 0:
            raise ValueError(f"invalid node address {self.node_id}:{self.port_index}")

    def __str__(self) -> str:
        return f"{self.node_id}:{self.port_index}"


@dataclass(frozen=True)
class Frame:
    conn_id: int
    seq: int
    kind: FrameKind
    payload: bytes = b""
    imm: int | None = None
    remote_addr: int | None = None
    rkey: int | None = None


@dataclass
class FabricConfig:
    mode: TransportMode = TransportMode.IN_PROCESS
    delivery_delay_ticks: int = 1
    completion_skew_ticks: int = 0
    rng_seed: int = 42
    delivery_jitter_ticks: int = 0
    port_count: int = 8

    def __post_init__(self):
        if self.delivery_delay_ticks < 0 or self.completion_skew_ticks < 0:
            raise ValueError("delays must be non-negative")
        if self.delivery_jitter_ticks < 0:
            raise ValueError("delivery_jitter_ticks must be non-negative")
        if self.port_count < 1:
            raise ValueError("port_count must be positive")


@dataclass(frozen=True)
class ScatterGather:
    addr: int
    length: int
    lkey: int


@dataclass
class WorkRequest:
    wr_id: int
    opcode: Opcode
    sg_list: tuple[ScatterGather, ...] = ()
    signaled: bool = True
    inline_flag: bool = False
    remote_addr: int | None = None
    rkey: int | None = None
    imm: int | None = None
    # Bytes captured at post time for inline sends; overrides the gather.
    inline_data: bytes | None = None

    @property
    def total_length(self) -> int:
        return sum(sge.length for sge in self.sg_list)

    def validate(self) -> None:
        if self.opcode in RDMA_OPCODES:
            if self.remote_addr is None or self.rkey is None:
                raise InvalidWorkRequest("RDMA work request needs remote_addr and rkey", self.wr_id)
        elif self.remote_addr is not None or self.rkey is not None:
            raise InvalidWorkRequest("SEND/RECV must not carry remote_addr or rkey", self.wr_id)
        if self.opcode == Opcode.RDMA_WRITE_WITH_IMM and self.imm is None:
            raise InvalidWorkRequest("RDMA_WRITE_WITH_IMM needs imm", self.wr_id)
        if self.imm is not None and not 0 <= self.imm <= 0xFFFFFFFF:
            raise InvalidWorkRequest("imm must fit 32 bits", self.wr_id)
        if any(sge.length < 0 for sge in self.sg_list):
            raise InvalidWorkRequest("negative scatter/gather length", self.wr_id)


@dataclass
class CompletionEvent:
    wr_id: int
    status: WcStatus
    opcode: Opcode
    byte_len: int
    qp_num: int
    imm: int | None = None
    error: str | None = None


@dataclass(frozen=True)
class Transition:
    kind: TransitionKind
    remote_lid: int | None = None
    remote_qp_num: int | None = None

    @classmethod
    def to_init(cls) -> "Transition":
        return cls(TransitionKind.TO_INIT)

    @classmethod
    def to_rtr(cls, remote_lid: int, remote_qp_num: int) -> "Transition":
        return cls(TransitionKind.TO_RTR, remote_lid, remote_qp_num)

    @classmethod
    def to_rts(cls) -> "Transition":
        return cls(TransitionKind.TO_RTS)


@dataclass(frozen=True)
class PortAttributes:
    lid: int
    port_index: int


@dataclass(frozen=True)
class QpAttributes:
    qp_num: int
    state: QpState
    remote_lid: int | None
    remote_qp_num: int | None


@dataclass
class DrainRound:
    """What one drain pass observed on one process."""

    rank: int
    events: int
    # Keyed by the receiving QP's virtual (lid, qp_num).
    recv_seen: dict[tuple[int, int], int] = field(default_factory=dict)
    send_retired: dict[tuple[int, int], int] = field(default_factory=dict)


@dataclass
class DrainReport:
    rank: int
    drained_events: int = 0
    wqes_outstanding: int = 0
    in_flight_at_quiesce: int = 0
    in_flight_ignored: int = 0
    rounds: int = 0
    unresolved: int = 0


@dataclass
class CheckpointSummary:
    epoch: int
    reports: dict[int, DrainReport] = field(default_factory=dict)
    image_paths: dict[int, str] = field(default_factory=dict)
    image_bytes: dict[int, int] = field(default_factory=dict)
    ckpt_ticks: int = 0
    unresolved: int = 0


@dataclass
class ImageStats:
    bytes_written: int
    sections: dict[str, int] = field(default_factory=dict)


@dataclass
class RestartReport:
    rank: int
    recreated: int = 0
    reposted: int = 0
    directory_entries: int = 0


@dataclass(frozen=True)
class OverheadDecomposition:
    startup_s: float
    ratio: float


@dataclass
class RunReport:
    """Outcome of one ``run`` or ``restart`` invocation."""

    workload: str
    ranks: int
    action: str | None = None
    outcome: Outcome = Outcome.ERROR
    digests: list[str] = field(default_factory=list)
    reference_digests: list[str] = field(default_factory=list)
    ckpt_time_ticks: int = 0
    restart_time_ticks: int = 0
    drained_event_counts: list[int] = field(default_factory=list)
    image_sizes: list[int] = field(default_factory=list)
    in_flight_at_quiesce: int = 0
    reposted: int = 0
    drain_unresolved: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    ckpt_wall_ms: float = 0.0
    restart_wall_ms: float = 0.0
    image_dir: str | None = None
    reason: str = ""

    @property
    def exit_code(self) -> int:
        return {Outcome.MATCH: 0, Outcome.MISMATCH: 1}.get(self.outcome, 2)

    def lines(self) -> list[str]:
        """``key=value`` lines; lists are comma-joined."""
        out = []
        for name, value in vars(self).items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = f"{value:.3f}"
            elif value is None:
                value = ""
            out.append(f"{name}={value}")
        return out
