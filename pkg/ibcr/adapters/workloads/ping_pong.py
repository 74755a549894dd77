from typing import Any

from ibcr.adapters.workloads.base import TAG_RECV
from ibcr.adapters.workloads.base import TAG_SEND
from ibcr.adapters.workloads.base import Workload
from ibcr.adapters.workloads.base import split_wr_id
from ibcr.adapters.workloads.base import with_imm
from ibcr.adapters.workloads.base import wr_id
from ibcr.domain.models import CompletionEvent
from ibcr.domain.models import Opcode
from ibcr.domain.models import WorkloadName
from ibcr.domain.models import WorkRequest
from ibcr.domain.workload import payload_bytes
from ibcr.hash import payload_hash


INLINE_MAX = 64


class PingPong(Workload):
    """Even ranks ping their odd neighbour, which answers every ping.

    One message per direction is outstanding at a time. Each side re-posts
    its single receive before sending, so the next message always finds it.
    Only every ``signaled_every``-th send (and the last, and every send
    carrying immediate data) asks for a completion; an unsignaled send counts
    as done once the iteration's receive has arrived. The next ping can
    overtake the ack of the last pong, so completions are parked per iteration
    and recorded once the iteration closes.
    """

    name = WorkloadName.PING_PONG

    def __init__(self, spec, rank, n_ranks):
        super().__init__(spec, rank, n_ranks)
        self.initiator = rank % 2 == 0
        self.peer = self.peers()[0]
        self.iteration = 0
        self.sent = 0
        self.recvs_done = 0
        self.recv_posted = 0
        self.parked: dict[str, list] = {}

    def peers(self) -> list[int]:
        return [self.rank + 1 if self.rank % 2 == 0 else self.rank - 1]

    def region_length(self) -> int:
        return 2 * self.slot

    @property
    def send_addr(self) -> int:
        return 0

    @property
    def recv_addr(self) -> int:
        return self.slot

    def prime(self, peer: int) -> None:
        self._post_recv()

    def _post_recv(self) -> None:
        self.post_recv(self.peer, self.recv_posted, self.recv_addr, self.spec.msg_size)
        self.recv_posted += 1

    def _imm(self, i: int) -> int | None:
        every = self.spec.imm_every
        return i if every and i % every == 0 else None

    def _signaled(self, i: int) -> bool:
        last = i == self.spec.iterations - 1
        return last or (i + 1) % self.spec.signaled_every == 0 or self._imm(i) is not None

    def _send(self) -> None:
        i = self.sent
        data = payload_bytes(self.spec.seed, self.rank, i, self.spec.msg_size)
        self.write(self.send_addr, data)
        self.post_send(self.peer, WorkRequest(
            wr_id(TAG_SEND, self.peer, i), Opcode.SEND, self.sge(self.send_addr, len(data)),
            signaled=self._signaled(i), inline_flag=len(data) <= INLINE_MAX, imm=self._imm(i),
        ))
        self.sent += 1

    @property
    def done(self) -> bool:
        return self.iteration >= self.spec.iterations

    @property
    def started(self) -> int:
        return self.sent

    def on_completion(self, event: CompletionEvent) -> None:
        tag, _, index = split_wr_id(event.wr_id)
        if tag == TAG_SEND:
            sent = payload_bytes(self.spec.seed, self.rank, index, self.spec.msg_size)
            data = with_imm(sent, self._imm(index))
        elif tag == TAG_RECV:
            data = with_imm(self.read(self.recv_addr, event.byte_len), event.imm)
            self.recvs_done += 1
            if self.recv_posted < self.spec.iterations:
                self._post_recv()
        else:
            return
        key = f"{'send' if tag == TAG_SEND else 'recv'}:{index}"
        self.parked[key] = [event.wr_id, int(event.opcode), event.byte_len, payload_hash(data)]

    def _send_closed(self, i: int) -> bool:
        return self.sent > i and (not self._signaled(i) or f"send:{i}" in self.parked)

    def _close_iteration(self) -> None:
        i = self.iteration
        order = ("send", "recv") if self.initiator else ("recv", "send")
        for kind in order:
            row = self.parked.pop(f"{kind}:{i}", None)
            if row is not None:
                self.records[self.peer].append(tuple(row))
        self.iteration += 1

    def advance(self) -> bool:
        moved = False
        while not self.done:
            i = self.iteration
            # responder answers only once the ping has arrived
            if self.sent == i and (self.initiator or self.recvs_done > i):
                self._send()
                moved = True
            elif self.recvs_done > i and self._send_closed(i):
                self._close_iteration()
                moved = True
            else:
                break
        return moved

    def save(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "sent": self.sent,
            "recvs_done": self.recvs_done,
            "recv_posted": self.recv_posted,
            "parked": dict(self.parked),
        }

    def load(self, data: dict[str, Any]) -> None:
        self.iteration = int(data["iteration"])
        self.sent = int(data["sent"])
        self.recvs_done = int(data["recvs_done"])
        self.recv_posted = int(data["recv_posted"])
        self.parked = {k: list(v) for k, v in data["parked"].items()}
