from __future__ import annotations

import math
import re

import numpy as np
import pytest
from hypothesis import settings

from locflow.grid import ChartGrid

settings.register_profile("locflow", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("locflow")


def torus(dimension: int, n: int, length: float = 2.0 * math.pi) -> ChartGrid:
    return ChartGrid((n,) * dimension, (length / n,) * dimension)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that ran."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            props = dict(getattr(rep, "user_properties", []))
            ok = rep.passed and rows.get(num, (True,))[0]
            prev = rows.get(num, (True, {}))[1]
            rows[num] = (ok, {**prev, **props})
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        ok, props = rows[num]
        runtime = props.get("runtime_s")
        took = f" [{runtime:.1f} s]" if runtime is not None else ""
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}{took} {props.get('summary', '')}")
