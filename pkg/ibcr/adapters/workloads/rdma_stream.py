"""One-sided fan-out from rank 0.

Rank 0 streams RDMA writes into a window of slots on every other rank,
signaling every ``signaled_every``-th write (and every write carrying
immediate data). At most ``window`` writes per target are outstanding, so a
source slot is never rewritten while a write from it may still be re-posted.
When a target's last write has completed, rank 0 reads the whole window back
in one RDMA read and records its digest.
"""

from typing import Any

from ibcr.adapters.workloads.base import TAG_READ
from ibcr.adapters.workloads.base import TAG_RECV
from ibcr.adapters.workloads.base import TAG_SEND
from ibcr.adapters.workloads.base import PeerInfo
from ibcr.adapters.workloads.base import Workload
from ibcr.adapters.workloads.base import split_wr_id
from ibcr.adapters.workloads.base import with_imm
from ibcr.adapters.workloads.base import wr_id
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import Opcode
from ibcr.domain.models import WorkloadName
from ibcr.domain.models import WorkRequest
from ibcr.domain.workload import payload_bytes


MIN_WINDOW = 16


class RdmaStream(Workload):
    name = WorkloadName.RDMA_STREAM

    def __init__(self, spec, rank, n_ranks):
        super().__init__(spec, rank, n_ranks)
        self.window = max(MIN_WINDOW, spec.signaled_every)
        self.source = rank == 0
        targets = self.peers()
        self.posted = dict.fromkeys(targets, 0)
        self.completed = dict.fromkeys(targets, 0)
        self.read_posted = dict.fromkeys(targets, False)
        self.read_done = dict.fromkeys(targets, False)
        self.recv_posted = 0
        self.recvs_done = 0

    def peers(self) -> list[int]:
        return list(range(1, self.n_ranks)) if self.rank == 0 else [0]

    @property
    def window_bytes(self) -> int:
        return self.window * self.slot

    def region_length(self) -> int:
        if self.rank == 0:
            return 2 * self.window_bytes * (self.n_ranks - 1)
        return self.window_bytes

    def max_send_wr(self) -> int:
        return self.window + 1

    def max_recv_wr(self) -> int:
        return self.window

    def _src(self, target: int) -> int:
        return (target - 1) * 2 * self.window_bytes

    def _readback(self, target: int) -> int:
        return self._src(target) + self.window_bytes

    def _imm(self, i: int) -> int | None:
        every = self.spec.imm_every
        return i if every and i % every == 0 else None

    def _signaled(self, i: int) -> bool:
        last = i == self.spec.iterations - 1
        return last or (i + 1) % self.spec.signaled_every == 0 or self._imm(i) is not None

    @property
    def expected_imm(self) -> int:
        every = self.spec.imm_every
        return len(range(0, self.spec.iterations, every)) if every else 0

    def peer_info(self, peer: int, lid: int, qp: Any) -> PeerInfo:
        if self.source:
            return PeerInfo(lid, qp.qp_num)
        return PeerInfo(lid, qp.qp_num, addr=0, rkey=self.mr.rkey)

    def prime(self, peer: int) -> None:
        if not self.source:
            while self.recv_posted < min(self.window, self.expected_imm):
                self._post_recv()

    def _post_recv(self) -> None:
        self.post_recv(0, self.recv_posted, 0, 0)
        self.recv_posted += 1

    @property
    def done(self) -> bool:
        if self.source:
            return all(self.read_done.values())
        return self.recvs_done >= self.expected_imm

    @property
    def started(self) -> int:
        return max(self.posted.values(), default=0)

    def on_completion(self, event: CompletionEvent) -> None:
        tag, peer, index = split_wr_id(event.wr_id)
        if tag == TAG_SEND:
            payload = payload_bytes(self.spec.seed, peer, index, self.spec.msg_size)
            self.record(peer, event, with_imm(payload, self._imm(index)))
            self.completed[peer] = index + 1
        elif tag == TAG_READ:
            self.record(peer, event, self.read(self._readback(peer), event.byte_len))
            self.read_done[peer] = True
        elif tag == TAG_RECV:
            imm = event.imm if event.imm is not None else 0
            self.record(0, event, imm.to_bytes(4, "little"))
            self.recvs_done += 1
            if self.recv_posted < self.expected_imm:
                self._post_recv()

    def _write(self, target: int) -> None:
        i = self.posted[target]
        info = self.remote[target]
        slot = i % self.window
        data = payload_bytes(self.spec.seed, target, i, self.spec.msg_size)
        src = self._src(target) + slot * self.slot
        self.write(src, data)
        imm = self._imm(i)
        self.post_send(target, WorkRequest(
            wr_id(TAG_SEND, target, i),
            Opcode.RDMA_WRITE if imm is None else Opcode.RDMA_WRITE_WITH_IMM,
            self.sge(src, len(data)),
            signaled=self._signaled(i),
            remote_addr=info.addr + slot * self.slot,
            rkey=info.rkey,
            imm=imm,
        ))
        self.posted[target] = i + 1

    def _read(self, target: int) -> None:
        info = self.remote[target]
        self.post_send(target, WorkRequest(
            wr_id(TAG_READ, target, 0), Opcode.RDMA_READ, self.sge(self._readback(target), self.window_bytes),
            remote_addr=info.addr, rkey=info.rkey,
        ))
        self.read_posted[target] = True

    def advance(self) -> bool:
        if not self.source:
            return False
        moved = False
        iterations = self.spec.iterations
        for target in self.peers():
            while self.posted[target] < iterations and self.posted[target] - self.completed[target] < self.window:
                self._write(target)
                moved = True
            if self.completed[target] == iterations and not self.read_posted[target]:
                self._read(target)
                moved = True
        return moved

    def save(self) -> dict[str, Any]:
        return {
            "posted": {str(k): v for k, v in self.posted.items()},
            "completed": {str(k): v for k, v in self.completed.items()},
            "read_posted": {str(k): v for k, v in self.read_posted.items()},
            "read_done": {str(k): v for k, v in self.read_done.items()},
            "recv_posted": self.recv_posted,
            "recvs_done": self.recvs_done,
        }

    def load(self, data: dict[str, Any]) -> None:
        self.posted = {int(k): int(v) for k, v in data["posted"].items()}
        self.completed = {int(k): int(v) for k, v in data["completed"].items()}
        self.read_posted = {int(k): bool(v) for k, v in data["read_posted"].items()}
        self.read_done = {int(k): bool(v) for k, v in data["read_done"].items()}
        self.recv_posted = int(data["recv_posted"])
        self.recvs_done = int(data["recvs_done"])
