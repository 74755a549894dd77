"""Coordinator phases, key-value exchange and barriers."""

import asyncio

import pytest

from ibcr.adapters.coordinator import Coordinator
from ibcr.adapters.coordinator import InProcessHub
from ibcr.domain.errors import CheckpointAborted
from ibcr.domain.errors import CoordinatorError
from ibcr.domain.errors import DuplicateNode
from ibcr.domain.errors import PublishConflict
from ibcr.domain.errors import RegistrationClosed
from ibcr.domain.errors import RestartAborted
from ibcr.domain.errors import UnknownNamespace
from ibcr.domain.models import DrainReport
from ibcr.domain.models import DrainRound
from ibcr.domain.models import Namespace
from ibcr.domain.models import Phase


class FakeAgent:
    """Reports ``events`` per drain round until they run out."""

    def __init__(
        self,
        rank: int,
        events: list[int],
        *,
        seen=None,
        retired=None,
        fail_on: str | None = None,
        acks_after: int = 0,
        unsignaled: int = 0,
    ):
        self.rank = rank
        self.events = list(events)
        self.seen = seen or {}
        self.retired = dict(retired or {})
        self.fail_on = fail_on
        # quiesce calls answered with None before the first acknowledgement
        self.acks_after = acks_after
        # delivered sends this agent can retire, all towards one key
        self.unsignaled = unsignaled
        self.calls: list[str] = []

    def _call(self, name: str) -> None:
        self.calls.append(name)
        if name == self.fail_on:
            raise RuntimeError(f"{name} broke")

    def quiesce(self) -> int | None:
        self._call("quiesce")
        if self.acks_after:
            self.acks_after -= 1
            return None
        return 0

    def drain_round(self) -> DrainRound:
        self._call("drain_round")
        n = self.events.pop(0) if self.events else 0
        return DrainRound(self.rank, n, dict(self.seen), dict(self.retired))

    def retire_delivered(self, delivered) -> int:
        self._call("retire_delivered")
        done = 0
        for key in self.retired:
            owed = min(self.unsignaled, delivered.get(key, 0) - self.retired[key])
            if owed > 0:
                self.retired[key] += owed
                self.unsignaled -= owed
                done += owed
        return done

    def finish_drain(self, rounds: int, unresolved: int) -> DrainReport:
        self._call("finish_drain")
        return DrainReport(rank=self.rank, drained_events=rounds, rounds=rounds, unresolved=unresolved)

    def write_image(self, epoch: int) -> tuple[str, int]:
        self._call("write_image")
        return f"rank-{self.rank}.img", 100 + self.rank

    def resume(self) -> None:
        self._call("resume")


def registered(n: int) -> tuple[Coordinator, list[int]]:
    coordinator = Coordinator()
    return coordinator, [coordinator.register(node) for node in range(n)]


def test_register_assigns_ids_and_rejects_duplicates():
    coordinator, ids = registered(2)
    assert ids == [1, 2]
    assert coordinator.client(1).phase == Phase.RUNNING
    with pytest.raises(DuplicateNode):
        coordinator.register(0)
    coordinator.close_registration()
    with pytest.raises(RegistrationClosed):
        coordinator.register(9)


def test_phase_transitions_are_checked():
    coordinator, [cid] = registered(1)
    with pytest.raises(CoordinatorError):
        coordinator.set_phase(cid, Phase.DRAINED)
    for phase in (Phase.QUIESCED, Phase.DRAINED, Phase.WRITTEN, Phase.RUNNING):
        coordinator.set_phase(cid, phase)
    assert coordinator.phase_log(cid) == [
        Phase.RUNNING, Phase.QUIESCED, Phase.DRAINED, Phase.WRITTEN, Phase.RUNNING,
    ]
    assert coordinator.audit_phase_log() == []


def test_begin_epoch_reopens_registration_in_restart_wait():
    coordinator, _ = registered(2)
    coordinator.close_registration()
    assert coordinator.begin_epoch(2) == 2
    cid = coordinator.register(0)
    assert coordinator.client(cid).phase == Phase.RESTART_WAIT
    coordinator.set_phase(cid, Phase.RUNNING)


def test_publish_is_idempotent_but_conflicts_fail():
    coordinator, [a, b] = registered(2)
    ns = str(Namespace.QP_REAL)
    coordinator.publish(a, ns, b"k", b"v")
    coordinator.publish(b, ns, b"k", b"v")
    with pytest.raises(PublishConflict):
        coordinator.publish(b, ns, b"k", b"w")
    with pytest.raises(UnknownNamespace):
        coordinator.publish(a, "nope", b"k", b"v")


def test_subscribe_sees_the_snapshot_of_the_last_barrier():
    coordinator, [a, b] = registered(2)
    ns = str(Namespace.LID)
    with pytest.raises(CoordinatorError):
        coordinator.subscribe(ns)
    coordinator.publish(a, ns, b"1", b"x")
    assert coordinator.barrier_arrive(a) == (1, False)
    assert coordinator.barrier_arrive(b) == (1, True)
    coordinator.publish(b, ns, b"2", b"y")
    assert coordinator.subscribe(ns) == {b"1": b"x"}


async def test_hub_barrier_releases_everyone():
    coordinator, ids = registered(3)
    hub = InProcessHub(coordinator, timeout=5)
    sessions = [hub.session(cid) for cid in ids]
    for i, session in enumerate(sessions):
        await session.publish(str(Namespace.QP_PD), bytes([i]), b"pd")
    generations = await asyncio.gather(*(s.barrier() for s in sessions))
    assert generations == [1, 1, 1]
    assert len(await sessions[0].subscribe(str(Namespace.QP_PD))) == 3


async def test_hub_barrier_times_out():
    coordinator, ids = registered(2)
    hub = InProcessHub(coordinator, timeout=0.01)
    with pytest.raises(RestartAborted):
        await hub.session(ids[0]).barrier()


def test_broadcast_checkpoint_runs_phases_in_lockstep():
    coordinator, ids = registered(2)
    agents = {ids[0]: FakeAgent(0, [3, 1]), ids[1]: FakeAgent(1, [2])}
    ticks = []
    summary = coordinator.broadcast_checkpoint(agents, ticks.append, drain_interval_ticks=7, settle_ticks=5)

    assert ticks == [5, 7, 7]
    assert sorted(summary.reports) == [0, 1]
    assert summary.reports[0].rounds == 3
    assert summary.image_bytes == {0: 100, 1: 101}
    assert summary.unresolved == 0
    for cid, agent in agents.items():
        assert agent.calls[0] == "quiesce"
        assert agent.calls[-2:] == ["write_image", "resume"]
        assert coordinator.client(cid).phase == Phase.RUNNING
    assert coordinator.audit_phase_log() == []


def test_broadcast_checkpoint_without_resume_stops_at_written():
    coordinator, ids = registered(1)
    coordinator.broadcast_checkpoint({ids[0]: FakeAgent(0, [])}, lambda t: None, resume=False)
    assert coordinator.client(ids[0]).phase == Phase.WRITTEN
    with pytest.raises(CoordinatorError):
        coordinator.broadcast_checkpoint({ids[0]: FakeAgent(0, [])}, lambda t: None)


def test_unmatched_receives_keep_draining_until_budget():
    coordinator, ids = registered(2)
    key = (0x100, 7)
    agents = {ids[0]: FakeAgent(0, [], seen={key: 1}), ids[1]: FakeAgent(1, [])}
    summary = coordinator.broadcast_checkpoint(agents, lambda t: None, drain_max_rounds=4)
    assert summary.unresolved == 1
    assert summary.reports[1].rounds == 4


def test_uncoordinated_drain_ignores_peers():
    coordinator, ids = registered(2)
    key = (0x100, 7)
    agents = {ids[0]: FakeAgent(0, [], seen={key: 1}), ids[1]: FakeAgent(1, [])}
    summary = coordinator.broadcast_checkpoint(agents, lambda t: None, coordinated=False)
    assert summary.unresolved == 0
    assert summary.reports[0].rounds == 1


def test_agent_failure_aborts_the_checkpoint():
    coordinator, ids = registered(2)
    agents = {ids[0]: FakeAgent(0, []), ids[1]: FakeAgent(1, [], fail_on="write_image")}
    with pytest.raises(CheckpointAborted):
        coordinator.broadcast_checkpoint(agents, lambda t: None)
    coordinator.register(5)


def test_abort_resumes_every_quiesced_client():
    coordinator, ids = registered(3)
    agents = {cid: FakeAgent(rank, []) for rank, cid in enumerate(ids)}
    agents[ids[1]].fail_on = "drain_round"
    with pytest.raises(CheckpointAborted) as ei:
        coordinator.broadcast_checkpoint(agents, lambda t: None)
    assert ei.value.client_id == ids[1]
    for cid, agent in agents.items():
        assert agent.calls[-1] == "resume"
        assert "write_image" not in agent.calls
        assert coordinator.client(cid).phase == Phase.RUNNING
    assert coordinator.audit_phase_log() == []

    again = {cid: FakeAgent(rank, []) for rank, cid in enumerate(ids)}
    summary = coordinator.broadcast_checkpoint(again, lambda t: None)
    assert sorted(summary.reports) == [0, 1, 2]


def test_late_quiesce_acknowledgement_is_awaited():
    coordinator, ids = registered(2)
    agents = {ids[0]: FakeAgent(0, []), ids[1]: FakeAgent(1, [], acks_after=2)}
    ticks = []
    coordinator.broadcast_checkpoint(agents, ticks.append, drain_interval_ticks=10)
    assert ticks == [10, 10]
    assert agents[ids[0]].calls.count("quiesce") == 1
    assert agents[ids[1]].calls.count("quiesce") == 3


def test_missing_quiesce_acknowledgement_aborts():
    coordinator, ids = registered(2)
    agents = {ids[0]: FakeAgent(0, []), ids[1]: FakeAgent(1, [], acks_after=100)}
    ticks = []
    with pytest.raises(CheckpointAborted, match="acknowledge quiesce"):
        coordinator.broadcast_checkpoint(agents, ticks.append, drain_interval_ticks=10, quiesce_timeout_ticks=25)
    assert ticks == [10, 10, 5]
    assert all(agent.calls[-1] == "resume" for agent in agents.values())
    assert all(coordinator.client(cid).phase == Phase.RUNNING for cid in ids)
    coordinator.register(7)


def test_delivered_unsignaled_sends_settle_the_drain():
    coordinator, ids = registered(2)
    key = (0x100, 7)
    agents = {
        ids[0]: FakeAgent(0, [], seen={key: 3}),
        ids[1]: FakeAgent(1, [], retired={key: 1}, unsignaled=2),
    }
    summary = coordinator.broadcast_checkpoint(agents, lambda t: None, drain_max_rounds=4)
    assert summary.unresolved == 0
    assert summary.reports[0].rounds == 1
    assert agents[ids[1]].retired == {key: 3}
