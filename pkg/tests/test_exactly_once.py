"""Seeded sweeps: every checkpointed run must end with the uninterrupted run's digests."""

import random

import pytest

from ibcr.domain.models import Action
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import Outcome
from ibcr.domain.models import WorkloadName
from ibcr.usecases.run import RunUsecase
from tests.test_checkpoint_restart import settings


SHAPES = [
    (WorkloadName.PING_PONG, 2),
    (WorkloadName.RDMA_STREAM, 3),
    (WorkloadName.RING_EXCHANGE, 3),
]


def resume_case(case: int) -> dict:
    rng = random.Random(case)
    name, nodes = SHAPES[case % len(SHAPES)]
    iters = rng.randint(4, 20)
    return {
        "workload": name,
        "nodes": nodes,
        "iters": iters,
        "msg_size": rng.choice([8, 64, 256]),
        "seed": rng.randrange(1 << 16),
        "ckpt_at": rng.randrange(iters),
        "signaled_every": rng.choice([1, 1, 2, 4]),
        "imm_every": rng.choice([None, None, 3]),
    }


@pytest.mark.parametrize("case", range(200))
async def test_resume_matches_uninterrupted_run(tmp_path, case):
    report = await RunUsecase(settings(tmp_path, action=Action.RESUME, **resume_case(case))).run()
    # a bookkeeping violation at quiesce turns the outcome into ERROR
    assert report.outcome == Outcome.MATCH, report.reason
    assert report.digests == report.reference_digests


@pytest.mark.parametrize("seed", range(100))
async def test_restart_reposts_what_was_in_flight(tmp_path, seed):
    policy = list(IdPolicy)[seed % len(IdPolicy)]
    cfg = settings(
        tmp_path, iters=12, seed=seed, ckpt_at=seed % 10, action=Action.RESTART,
        signaled_every=1 + seed % 2,
        fabric={"delivery_delay_ticks": 5000}, plugin={"id_policy": policy},
    )
    report = await RunUsecase(cfg).run()
    assert report.outcome == Outcome.MATCH, report.reason
    assert report.in_flight_at_quiesce >= 1
    assert report.reposted >= 1


@pytest.mark.parametrize("skew", [1, 50, 150])
@pytest.mark.parametrize(("name", "nodes"), SHAPES[:2])
async def test_skewed_completions_are_drained(tmp_path, skew, name, nodes):
    cfg = settings(
        tmp_path, workload=name, nodes=nodes, ckpt_at=10, action=Action.RESTART,
        fabric={"completion_skew_ticks": skew},
        plugin={"drain_interval_ticks": 100, "id_policy": IdPolicy.GLOBALLY_UNIQUE_VIRTUAL},
    )
    report = await RunUsecase(cfg).run()
    assert report.outcome == Outcome.MATCH, report.reason
    assert report.drain_unresolved == 0
