"""Token ring over a shared receive queue.

Every round each rank sends part of its tokens to the right and receives
from the left. The first 8 bytes of a message carry the token count, the
rest is seeded filler. Receives go through a shared receive queue holding
one slot per posted buffer; a slot is re-posted once its message has been
consumed, so the left neighbour running ahead never lands on unread data.
"""

import random
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


TOKEN_BYTES = 8


def initial_tokens(seed: int, rank: int) -> int:
    return random.Random(f"{seed}:tokens:{rank}").randint(10, 1000)


class RingExchange(Workload):
    name = WorkloadName.RING_EXCHANGE

    def __init__(self, spec, rank, n_ranks):
        self.left = (rank - 1) % n_ranks
        self.right = (rank + 1) % n_ranks
        super().__init__(spec, rank, n_ranks)
        self.tokens = initial_tokens(spec.seed, rank)
        self.round = 0
        self.sent = 0
        self.sends_done = 0
        self.recv_posted = 0
        # messages received but not yet applied: round -> [tokens, row]
        self.inbox: dict[str, list] = {}
        self.send_rows: dict[str, list] = {}

    def peers(self) -> list[int]:
        return sorted({self.left, self.right})

    def srq_depth(self) -> int:
        return self.n_ranks + 1

    def region_length(self) -> int:
        return (1 + self.srq_depth()) * self.slot

    def _slot_addr(self, index: int) -> int:
        return (1 + index % self.srq_depth()) * self.slot

    def prime(self, peer: int) -> None:
        if peer != self.left:
            return
        while self.recv_posted < min(self.srq_depth(), self.spec.iterations):
            self._post_recv()
        self.verbs.modify_srq(self.srq, 1)

    def _post_recv(self) -> None:
        self.post_srq_recv(self.recv_posted, self._slot_addr(self.recv_posted), self.spec.msg_size)
        self.recv_posted += 1

    def _imm(self, i: int) -> int | None:
        every = self.spec.imm_every
        return i if every and i % every == 0 else None

    def _give(self, i: int) -> int:
        return random.Random(f"{self.spec.seed}:give:{self.rank}:{i}").randint(0, self.tokens)

    @property
    def done(self) -> bool:
        return self.round >= self.spec.iterations

    @property
    def started(self) -> int:
        return self.sent

    def _send(self) -> None:
        i = self.sent
        give = self._give(i)
        filler = payload_bytes(self.spec.seed, self.rank, i, self.spec.msg_size)
        data = give.to_bytes(TOKEN_BYTES, "little") + filler[TOKEN_BYTES:]
        self.write(0, data)
        self.tokens -= give
        self.post_send(self.right, WorkRequest(
            wr_id(TAG_SEND, self.right, i), Opcode.SEND, self.sge(0, len(data)), imm=self._imm(i),
        ))
        self.send_rows[str(i)] = [payload_hash(with_imm(data, self._imm(i)))]
        self.sent += 1

    def on_completion(self, event: CompletionEvent) -> None:
        tag, _, index = split_wr_id(event.wr_id)
        if tag == TAG_SEND:
            row = self.send_rows[str(index)]
            row[:0] = [event.wr_id, int(event.opcode), event.byte_len]
            self.sends_done += 1
        elif tag == TAG_RECV:
            data = self.read(self._slot_addr(index), event.byte_len)
            got = int.from_bytes(data[:TOKEN_BYTES], "little")
            # the receive wr index is the round it carries; FIFO on one connection
            self.inbox[str(index)] = [
                got, [event.wr_id, int(event.opcode), event.byte_len, payload_hash(with_imm(data, event.imm))],
            ]
            if self.recv_posted < self.spec.iterations:
                self._post_recv()

    def advance(self) -> bool:
        moved = False
        while not self.done:
            i = self.round
            if self.sent == i:
                self._send()
                moved = True
            elif self.sends_done > i and str(i) in self.inbox:
                got, row = self.inbox.pop(str(i))
                self.tokens += got
                self.records[self.right].append(tuple(self.send_rows.pop(str(i))))
                self.records[self.left].append(tuple(row))
                self.round += 1
                moved = True
            else:
                break
        return moved

    def save(self) -> dict[str, Any]:
        return {
            "tokens": self.tokens,
            "round": self.round,
            "sent": self.sent,
            "sends_done": self.sends_done,
            "recv_posted": self.recv_posted,
            "inbox": dict(self.inbox),
            "send_rows": dict(self.send_rows),
        }

    def load(self, data: dict[str, Any]) -> None:
        self.tokens = int(data["tokens"])
        self.round = int(data["round"])
        self.sent = int(data["sent"])
        self.sends_done = int(data["sends_done"])
        self.recv_posted = int(data["recv_posted"])
        self.inbox = {k: [v[0], list(v[1])] for k, v in data["inbox"].items()}
        self.send_rows = {k: list(v) for k, v in data["send_rows"].items()}
