"""Forward-looking KV-cache feasibility oracle.

Projection always uses predicted output lengths.  A request started at
``p`` with prediction ``õ`` is projected to hold ``s + t' - p`` tokens at
every ``t'`` with ``t' - p <= õ`` (inclusive: memory is still held in the
final round).  Candidates in ``U`` are treated as starting at ``now``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import KvschedError, Request


class ProjectionError(KvschedError, ValueError):
    pass


@dataclass(frozen=True, slots=True)
class InFlight:
    request: Request
    start: int

    @property
    def predicted_end(self) -> int:
        return self.start + self.request.predicted_len

    @property
    def true_end(self) -> int:
        return self.start + self.request.output_len

    def occupancy_at(self, t: int) -> int:
        """Actual tokens held at round ``t`` (true length)."""
        if self.start < t <= self.true_end:
            return self.request.prompt_size + t - self.start
        return 0


def observed(f: InFlight, now: int) -> InFlight:
    """The in-flight request as the scheduler can see it at round ``now``.

    A request still running past its predicted end has visibly been
    underestimated; its prediction is raised to the smallest value
    consistent with that, so it is projected to hold memory next round.
    """
    least = now - f.start + 1
    if f.request.predicted_len >= least:
        return f
    return InFlight(replace(f.request, predicted_len=least), f.start)


@dataclass(frozen=True)
class FeasibilityQuery:
    now: int
    in_flight: Sequence[InFlight] = ()
    candidates: Sequence[Request] = ()
    budget: int = 0

    def __post_init__(self) -> None:
        ids = {f.request.id for f in self.in_flight}
        for c in self.candidates:
            if c.id in ids:
                raise ProjectionError(f"candidate {c.id} is already in flight")

    def with_candidates(self, candidates: Sequence[Request]) -> "FeasibilityQuery":
        return FeasibilityQuery(self.now, self.in_flight, tuple(candidates), self.budget)


@dataclass
class EvalCounter:
    """Counts evaluations of the projected-memory inequality."""

    total: int = 0
    per_round: dict[int, int] = field(default_factory=dict)

    def add(self, now: int, k: int) -> None:
        self.total += k
        self.per_round[now] = self.per_round.get(now, 0) + k


def projected_occupancy(query: FeasibilityQuery, at: int) -> int:
    if at <= query.now:
        raise ProjectionError("projection must look forward")
    total = 0
    for f in query.in_flight:
        r = f.request
        if r.predicted_len >= at - f.start:
            total += r.prompt_size + at - f.start
    for r in query.candidates:
        if r.predicted_len >= at - query.now:
            total += r.prompt_size + at - query.now
    return total


def _ends(query: FeasibilityQuery) -> list[int]:
    ends = [f.predicted_end for f in query.in_flight]
    ends.extend(query.now + r.predicted_len for r in query.candidates)
    return ends


def checkpoint_rounds(query: FeasibilityQuery) -> list[int]:
    return sorted({e for e in _ends(query) if e > query.now})


def is_feasible(query: FeasibilityQuery, counter: EvalCounter | None = None) -> bool:
    """Check the projected-memory inequality at every checkpoint round."""
    checks = 0
    ok = True
    for t in checkpoint_rounds(query):
        checks += 1
        if projected_occupancy(query, t) > query.budget:
            ok = False
            break
    if counter is not None:
        counter.add(query.now, checks)
    return ok


def is_feasible_exhaustive(query: FeasibilityQuery) -> bool:
    """Oracle: scan every round in ``[now+1, t_max]``."""
    t_max = max(_ends(query), default=query.now)
    return all(
        projected_occupancy(query, t) <= query.budget for t in range(query.now + 1, t_max + 1)
    )


class ProjectionProfile:
    """Projected usage of an in-flight set over offsets ``1..H`` past ``now``.

    Equivalent to :func:`is_feasible` on checkpoint rounds (the maximum of a
    piecewise-increasing profile sits on a checkpoint) but vectorised, so
    admission at large memory limits stays cheap.
    """

    def __init__(self, now: int, in_flight: Sequence[InFlight], horizon: int = 0):
        self.now = now
        rem = [f.predicted_end - now for f in in_flight]
        h = max([horizon, 0, *rem])
        self.usage = np.zeros(h, dtype=np.int64)
        if in_flight:
            rem_a = np.array(rem, dtype=np.int64)
            base = np.array([f.request.prompt_size - f.start + now for f in in_flight], dtype=np.int64)
            keep = rem_a > 0
            rem_a, base = rem_a[keep], base[keep]
            if rem_a.size:
                # count[k] and base_sum[k] over requests still projected at offset k+1
                cnt = np.bincount(rem_a - 1, minlength=h)[::-1].cumsum()[::-1]
                bsum = np.bincount(rem_a - 1, weights=base, minlength=h)[::-1].cumsum()[::-1]
                offs = np.arange(1, h + 1, dtype=np.int64)
                self.usage += bsum.astype(np.int64) + cnt * offs
        self.checks = 0

    def _grow(self, h: int) -> None:
        if h > self.usage.size:
            self.usage = np.concatenate([self.usage, np.zeros(h - self.usage.size, dtype=np.int64)])

    def peak(self) -> int:
        return int(self.usage.max()) if self.usage.size else 0

    def try_add(self, prompt_size: int, predicted_len: int, budget: int) -> bool:
        """Add a candidate starting now if the whole profile stays within budget."""
        self._grow(predicted_len)
        self.checks += 1
        head = self.usage[:predicted_len] + prompt_size + np.arange(1, predicted_len + 1)
        rest = self.usage[predicted_len:]
        peak = max(int(head.max()), int(rest.max()) if rest.size else 0)
        if peak > budget:
            return False
        self.usage[:predicted_len] = head
        return True
