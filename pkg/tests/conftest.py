"""Shared hypothesis strategies and helpers."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from kvsched.core import Instance, Request
from kvsched.kvmemory import FeasibilityQuery, InFlight


@st.composite
def instances(draw, max_n: int = 4, max_m: int = 8, max_arrival: int = 3,
              servable: bool = True, overestimate: bool | None = None):
    """Small random instances; predictions exact, over- or two-sided."""
    M = draw(st.integers(2, max_m))
    n = draw(st.integers(0, max_n))
    reqs = []
    for i in range(n):
        s = draw(st.integers(1, M - 1))
        o_hi = M - s if servable else M
        o = draw(st.integers(1, max(1, o_hi)))
        a = draw(st.integers(0, max_arrival))
        if overestimate is None:
            pred = o
        elif overestimate:
            pred = draw(st.integers(o, max(o, M - s)))
        else:
            pred = draw(st.integers(1, 2 * o))
        reqs.append(Request(i, a, s, o, pred))
    return Instance.build(M, reqs)


@st.composite
def feasibility_queries(draw, max_items: int = 5):
    now = draw(st.integers(0, 6))
    n_s = draw(st.integers(0, max_items))
    n_u = draw(st.integers(0, max_items))
    in_flight = []
    for i in range(n_s):
        pred = draw(st.integers(1, 9))
        # started in the past and still projected at or after now
        start = draw(st.integers(max(0, now - pred), now))
        in_flight.append(InFlight(Request(i, 0, draw(st.integers(1, 6)), pred, pred), start))
    cands = [Request(n_s + j, 0, draw(st.integers(1, 6)), 1, draw(st.integers(1, 9)))
             for j in range(n_u)]
    budget = draw(st.integers(0, 60))
    return FeasibilityQuery(now, tuple(in_flight), tuple(cands), budget)


def random_query(rng: np.random.Generator) -> FeasibilityQuery:
    """Plain-numpy fuzzer used where hypothesis would be too slow (10^4 cases)."""
    now = int(rng.integers(0, 20))
    in_flight = []
    k = 0
    for _ in range(int(rng.integers(0, 8))):
        pred = int(rng.integers(1, 30))
        start = int(rng.integers(max(0, now - pred), now + 1))
        in_flight.append(InFlight(Request(k, 0, int(rng.integers(1, 20)), pred, pred), start))
        k += 1
    cands = []
    for _ in range(int(rng.integers(0, 8))):
        cands.append(Request(k, 0, int(rng.integers(1, 20)), 1, int(rng.integers(1, 30))))
        k += 1
    budget = int(rng.integers(0, 400))
    return FeasibilityQuery(now, tuple(in_flight), tuple(cands), budget)


# --------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, echoed after the run

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a criterion outcome; returns ``ok`` so the caller can assert it."""

    def record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
