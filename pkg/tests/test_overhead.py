"""Startup/ratio split of checkpointing overhead."""

import pytest

from ibcr.domain.errors import DegenerateInputs
from ibcr.usecases.overhead import derive_overhead
from ibcr.usecases.overhead import derive_overhead_from_runtimes
from ibcr.usecases.overhead import overhead_lines
from ibcr.usecases.overhead import runtime_overhead_pct


def test_lu_64_process_rows():
    result = derive_overhead(18.5, 3.2, 292.6, 5.4)
    assert result.ratio == pytest.approx(0.008, abs=0.001)
    assert result.startup_s == pytest.approx(3.1, abs=0.1)


def test_from_runtimes_matches_overheads():
    direct = derive_overhead(18.5, 21.7 - 18.5, 292.6, 298.0 - 292.6)
    measured = derive_overhead_from_runtimes(18.5, 21.7, 292.6, 298.0)
    assert measured.ratio == pytest.approx(direct.ratio, abs=1e-12)
    assert measured.startup_s == pytest.approx(3.1, abs=0.1)
    assert measured.ratio * 100 == pytest.approx(0.8, abs=0.1)


def test_flat_overhead_has_zero_ratio():
    result = derive_overhead(10.0, 4.0, 50.0, 4.0)
    assert result.ratio == 0
    assert result.startup_s == pytest.approx(4.0)


def test_input_order_does_not_matter():
    a = derive_overhead(18.5, 3.2, 292.6, 5.4)
    b = derive_overhead(292.6, 5.4, 18.5, 3.2)
    assert a.ratio == pytest.approx(b.ratio, abs=1e-12)
    assert a.startup_s == pytest.approx(b.startup_s, abs=1e-9)


@pytest.mark.parametrize("t1,o1,t2,o2", [(1.0, 0.5, 2.0, 0.9), (18.5, 3.2, 292.6, 5.4), (100.0, 7.0, 3.0, 1.0)])
def test_reconstructs_inputs(t1, o1, t2, o2):
    result = derive_overhead(t1, o1, t2, o2)
    assert result.startup_s + result.ratio * t1 == pytest.approx(o1, abs=1e-9)
    assert result.startup_s + result.ratio * t2 == pytest.approx(o2, abs=1e-9)


def test_equal_runtimes_are_degenerate():
    with pytest.raises(DegenerateInputs):
        derive_overhead(5.0, 1.0, 5.0, 2.0)


def test_runtime_overhead_pct():
    assert runtime_overhead_pct(200.0, 210.0) == pytest.approx(5.0)
    with pytest.raises(DegenerateInputs):
        runtime_overhead_pct(0.0, 1.0)


def test_overhead_lines_are_key_value():
    lines = overhead_lines(derive_overhead(10.0, 4.0, 50.0, 4.0))
    assert lines[0] == "startup_s=4.000"
    assert all("=" in line for line in lines)
