"""Workload specs and the transcripts used as the correctness oracle."""

import random
from dataclasses import dataclass
from dataclasses import field
from typing import Any

from ibcr.domain.models import Opcode
from ibcr.domain.models import WorkloadName
from ibcr.domain.validation import SpecError
from ibcr.hash import payload_hash
from ibcr.hash import transcript_digest


MIN_RANKS = {
    WorkloadName.PING_PONG: 2,
    WorkloadName.RDMA_STREAM: 2,
    WorkloadName.RING_EXCHANGE: 3,
}


@dataclass(frozen=True)
class WorkloadSpec:
    name: WorkloadName
    iterations: int
    msg_size: int
    imm_every: int | None = None
    signaled_every: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.iterations < 1:
            raise SpecError(f"iterations must be >= 1, got {self.iterations}")
        if self.msg_size < 1:
            raise SpecError(f"msg_size must be >= 1, got {self.msg_size}")
        if self.signaled_every < 1:
            raise SpecError(f"signaled_every must be >= 1, got {self.signaled_every}")
        if self.imm_every is not None and self.imm_every < 1:
            raise SpecError(f"imm_every must be >= 1, got {self.imm_every}")
        if self.name == WorkloadName.RING_EXCHANGE and self.msg_size < 8:
            raise SpecError("ring_exchange carries an 8-byte token count; msg_size must be >= 8")

    def check_ranks(self, n_ranks: int) -> None:
        minimum = MIN_RANKS[self.name]
        if n_ranks < minimum:
            raise SpecError(f"{self.name} needs at least {minimum} ranks, got {n_ranks}")
        if self.name == WorkloadName.PING_PONG and n_ranks % 2:
            raise SpecError(f"ping_pong pairs ranks; rank count must be even, got {n_ranks}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": str(self.name),
            "iterations": self.iterations,
            "msg_size": self.msg_size,
            "imm_every": self.imm_every,
            "signaled_every": self.signaled_every,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WorkloadSpec":
        return cls(
            name=WorkloadName(data["name"]),
            iterations=int(data["iterations"]),
            msg_size=int(data["msg_size"]),
            imm_every=None if data.get("imm_every") is None else int(data["imm_every"]),
            signaled_every=int(data.get("signaled_every", 1)),
            seed=int(data.get("seed", 42)),
        )


def parse_workload_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise SpecError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def payload_bytes(seed: int, rank: int, index: int, size: int) -> bytes:
    return random.Random(f"{seed}:{rank}:{index}").randbytes(size)


@dataclass(frozen=True)
class TranscriptEntry:
    event_index: int
    wr_id: int
    opcode: Opcode
    byte_len: int
    payload_hash: str

    def row(self) -> tuple[int, int, int, int, str]:
        return (self.event_index, self.wr_id, int(self.opcode), self.byte_len, self.payload_hash)


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)

    def record(self, wr_id: int, opcode: Opcode, byte_len: int, data: bytes) -> None:
        self.entries.append(
            TranscriptEntry(len(self.entries), wr_id, opcode, byte_len, payload_hash(data))
        )

    def digest(self) -> str:
        return transcript_digest(e.row() for e in self.entries)

    def to_rows(self) -> list[list[Any]]:
        return [list(e.row()) for e in self.entries]

    @classmethod
    def from_rows(cls, rows: list[list[Any]]) -> "Transcript":
        return cls(
            [TranscriptEntry(int(i), int(w), Opcode(int(o)), int(b), str(h)) for i, w, o, b, h in rows]
        )


def verify(a: Transcript, b: Transcript) -> bool:
    return a.digest() == b.digest()
