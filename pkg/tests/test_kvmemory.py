import numpy as np
import pytest
from hypothesis import given, settings

from kvsched.core import Request
from kvsched.kvmemory import (
    EvalCounter,
    FeasibilityQuery,
    InFlight,
    ProjectionError,
    ProjectionProfile,
    checkpoint_rounds,
    is_feasible,
    is_feasible_exhaustive,
    observed,
    projected_occupancy,
)

from conftest import feasibility_queries, random_query


def cand(i, s, pred):
    return Request(i, 0, s, 1, pred)


def flight(i, s, pred, start):
    return InFlight(Request(i, 0, s, pred, pred), start)


def test_projected_occupancy_examples():
    q = FeasibilityQuery(0, (), (cand(0, 1, 2), cand(1, 1, 2)), 10)
    assert projected_occupancy(q, 2) == 6
    q = FeasibilityQuery(1, (flight(0, 2, 3, 0),), (), 10)
    assert projected_occupancy(q, 3) == 5
    assert projected_occupancy(q, 4) == 0


def test_projection_must_look_forward():
    q = FeasibilityQuery(3, (), (), 10)
    with pytest.raises(ProjectionError, match="projection must look forward"):
        projected_occupancy(q, 3)


def test_candidates_disjoint_from_in_flight():
    with pytest.raises(ProjectionError):
        FeasibilityQuery(1, (flight(0, 1, 2, 0),), (cand(0, 1, 2),), 5)


def test_checkpoint_examples():
    q = FeasibilityQuery(1, (flight(0, 1, 3, 0),), (cand(1, 1, 2),), 10)
    assert checkpoint_rounds(q) == [3]
    assert checkpoint_rounds(FeasibilityQuery(0)) == []
    q = FeasibilityQuery(2, (), (cand(0, 1, 1), cand(1, 1, 4)), 10)
    assert checkpoint_rounds(q) == [3, 6]


def test_is_feasible_examples():
    pair = (cand(0, 1, 2), cand(1, 1, 2))
    assert is_feasible(FeasibilityQuery(0, (), pair, 6))
    assert not is_feasible(FeasibilityQuery(0, (), pair, 5))
    assert is_feasible(FeasibilityQuery(4, (flight(0, 2, 3, 2),), (), 6))


def test_in_flight_alone_is_checked():
    # nothing to add, but the running set is already projected above budget
    q = FeasibilityQuery(0, (flight(0, 5, 3, 0),), (), 6)
    assert not is_feasible(q)


def test_counter_counts_checkpoints():
    c = EvalCounter()
    is_feasible(FeasibilityQuery(2, (), (cand(0, 1, 1), cand(1, 1, 4)), 100), c)
    assert c.total == 2 and c.per_round == {2: 2}


@settings(max_examples=400)
@given(feasibility_queries())
def test_checkpoint_sufficiency(q):
    assert is_feasible(q) == is_feasible_exhaustive(q)


def test_checkpoint_sufficiency_numpy_fuzz():
    rng = np.random.default_rng(11)
    for _ in range(2000):
        q = random_query(rng)
        assert is_feasible(q) == is_feasible_exhaustive(q)


@settings(max_examples=300)
@given(feasibility_queries())
def test_monotone_in_candidates(q):
    if is_feasible(q):
        for k in range(len(q.candidates)):
            smaller = q.with_candidates(q.candidates[:k] + q.candidates[k + 1:])
            assert is_feasible(smaller)


@settings(max_examples=300)
@given(feasibility_queries())
def test_projection_bounds(q):
    cap = sum(f.request.prompt_size + f.request.predicted_len for f in q.in_flight)
    cap += sum(r.prompt_size + r.predicted_len for r in q.candidates)
    for t in range(q.now + 1, q.now + 12):
        assert 0 <= projected_occupancy(q, t) <= cap


@settings(max_examples=300)
@given(feasibility_queries())
def test_profile_matches_reference_prefix(q):
    """The vectorised profile admits exactly the prefix the oracle admits."""
    prof = ProjectionProfile(q.now, q.in_flight)
    fast = []
    for c in q.candidates:
        if not prof.try_add(c.prompt_size, c.predicted_len, q.budget):
            break
        fast.append(c.id)
    ref = []
    for c in q.candidates:
        trial = q.with_candidates([*(r for r in q.candidates if r.id in ref), c])
        if not is_feasible(trial):
            break
        ref.append(c.id)
    assert fast == ref


def test_observed_raises_overdue_predictions():
    f = InFlight(Request(0, 0, 3, 10, 2), start=1)
    assert observed(f, 2) is f  # still within its prediction
    late = observed(f, 6)
    assert late.request.predicted_len == 6 and late.request.output_len == 10
    q = FeasibilityQuery(6, (late,), (), 100)
    assert projected_occupancy(q, 7) == 3 + 6
    assert projected_occupancy(q, 8) == 0
