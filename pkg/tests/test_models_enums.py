"""Enums behave as strings and reports render as key=value lines."""

from ibcr.domain.models import Action
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import Outcome
from ibcr.domain.models import RunReport
from ibcr.domain.models import TransportMode
from ibcr.domain.models import WorkloadName


def test_enums_compare_equal_to_strings():
    assert TransportMode.IN_PROCESS == "sim"
    assert Action.RESTART_MIGRATE == "restart_migrate"
    assert IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE == "real_equals_virtual"


def test_enum_dict_lookup_by_string():
    table = {WorkloadName.PING_PONG: 1}
    assert table["ping_pong"] == 1


def test_exit_codes():
    assert RunReport("ping_pong", 2, outcome=Outcome.MATCH).exit_code == 0
    assert RunReport("ping_pong", 2, outcome=Outcome.MISMATCH).exit_code == 1
    assert RunReport("ping_pong", 2).exit_code == 2


def test_report_lines():
    report = RunReport(
        "ring_exchange", 3, action="resume", outcome=Outcome.MATCH, digests=["a", "b", "c"], ckpt_wall_ms=1.5
    )
    lines = dict(line.split("=", 1) for line in report.lines())
    assert lines["outcome"] == "MATCH"
    assert lines["digests"] == "a,b,c"
    assert lines["ckpt_wall_ms"] == "1.500"
    assert lines["image_dir"] == ""
