"""Startup cost and runtime ratio of checkpointing overhead.

Overhead is modelled as ``o = s + r * t``: a fixed startup cost ``s`` plus a
share ``r`` of the native runtime ``t``. Two (t, o) measurements of the same
configuration at different problem sizes pin both down.
"""

import math

from ibcr.domain.errors import DegenerateInputs
from ibcr.domain.models import OverheadDecomposition


def derive_overhead(t1: float, o1: float, t2: float, o2: float) -> OverheadDecomposition:
    if math.isclose(t1, t2, rel_tol=0.0, abs_tol=1e-12):
        raise DegenerateInputs(f"runtimes must differ, both are {t1}")
    ratio = (o2 - o1) / (t2 - t1)
    return OverheadDecomposition(startup_s=o1 - ratio * t1, ratio=ratio)


def derive_overhead_from_runtimes(
    native1: float, measured1: float, native2: float, measured2: float
) -> OverheadDecomposition:
    """Same as ``derive_overhead`` but from runtimes with and without checkpointing."""
    return derive_overhead(native1, measured1 - native1, native2, measured2 - native2)


def runtime_overhead_pct(native: float, measured: float) -> float:
    if native <= 0:
        raise DegenerateInputs(f"native runtime must be positive, got {native}")
    return (measured - native) / native * 100.0


def overhead_lines(result: OverheadDecomposition) -> list[str]:
    return [f"startup_s={result.startup_s:.3f}", f"ratio={result.ratio:.6f}", f"ratio_pct={result.ratio * 100:.2f}"]
