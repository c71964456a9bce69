"""Domain types and round/memory semantics shared by the whole package.

A request that starts at round ``p`` holds ``s + k`` KV tokens at round
``p + k`` for ``k = 1..o`` and completes at round ``p + o``.  All
quantities are exact integers; average latency is a :class:`Fraction`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence


class KvschedError(Exception):
    """Base class for errors raised by this package."""


class IncompleteScheduleError(KvschedError):
    pass


class InstanceError(KvschedError, ValueError):
    pass


def _check_int(name: str, value: object, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InstanceError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InstanceError(f"{name} must be >= {minimum}, got {value}")


@dataclass(frozen=True, slots=True)
class Request:
    """One prompt job.

    ``predicted_len`` defaults to the true output length when omitted.
    """

    id: int
    arrival: int
    prompt_size: int
    output_len: int
    predicted_len: int = 0

    def __post_init__(self) -> None:
        _check_int("id", self.id, 0)
        _check_int("arrival", self.arrival, 0)
        _check_int("prompt_size", self.prompt_size, 1)
        _check_int("output_len", self.output_len, 1)
        if self.predicted_len == 0:
            object.__setattr__(self, "predicted_len", self.output_len)
        _check_int("predicted_len", self.predicted_len, 1)

    @property
    def prediction_is_overestimate(self) -> bool:
        return self.predicted_len >= self.output_len

    @property
    def volume(self) -> int:
        """Memory-rounds consumed over the request's lifetime."""
        return volume(self.prompt_size, self.output_len)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "arrival": self.arrival,
            "prompt_size": self.prompt_size,
            "output_len": self.output_len,
            "predicted_len": self.predicted_len,
        }


def volume(s: int, o: int) -> int:
    return s * o + o * (o + 1) // 2


@dataclass(frozen=True, slots=True)
class Instance:
    memory_limit: int
    requests: tuple[Request, ...] = ()

    def __post_init__(self) -> None:
        _check_int("memory_limit", self.memory_limit, 1)
        reqs = tuple(self.requests)
        object.__setattr__(self, "requests", reqs)
        for pos, r in enumerate(reqs):
            if r.id != pos:
                raise InstanceError(
                    f"request ids must be dense 0..n-1 in (arrival, id) order; "
                    f"position {pos} holds id {r.id}"
                )
            if pos and reqs[pos - 1].arrival > r.arrival:
                raise InstanceError("requests must be sorted by (arrival, id)")
            if r.prompt_size + 1 > self.memory_limit:
                raise InstanceError(
                    f"request {r.id}: first round needs {r.prompt_size + 1} tokens "
                    f"but memory_limit is {self.memory_limit}"
                )

    @classmethod
    def build(cls, memory_limit: int, requests: Iterable[Request]) -> "Instance":
        """Sort by (arrival, id) and renumber ids densely."""
        ordered = sorted(requests, key=lambda r: (r.arrival, r.id))
        renumbered = [
            Request(k, r.arrival, r.prompt_size, r.output_len, r.predicted_len)
            for k, r in enumerate(ordered)
        ]
        return cls(memory_limit, tuple(renumbered))

    @property
    def n(self) -> int:
        return len(self.requests)

    def __len__(self) -> int:
        return len(self.requests)

    @property
    def servable(self) -> bool:
        """True when every request fits on its own for its whole lifetime."""
        return all(r.prompt_size + r.output_len <= self.memory_limit for r in self.requests)

    def serial_horizon(self) -> int:
        """Makespan of running requests one at a time; always feasible when servable."""
        t = 0
        for r in self.requests:
            t = max(t, r.arrival) + r.output_len
        return t

    def shifted(self, delta: int) -> "Instance":
        return Instance(
            self.memory_limit,
            tuple(
                Request(r.id, r.arrival + delta, r.prompt_size, r.output_len, r.predicted_len)
                for r in self.requests
            ),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "memory_limit": self.memory_limit,
            "requests": [r.to_dict() for r in self.requests],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Instance":
        reqs = [
            Request(
                int(row["id"]),
                int(row["arrival"]),
                int(row["prompt_size"]),
                int(row["output_len"]),
                int(row.get("predicted_len", 0) or 0),
            )
            for row in data["requests"]
        ]
        return cls(int(data["memory_limit"]), tuple(reqs))


@dataclass(frozen=True)
class Schedule:
    """Start round per request id."""

    start: Mapping[int, int] = field(default_factory=dict)

    def completion(self, instance: Instance) -> dict[int, int]:
        return {r.id: self.start[r.id] + r.output_len for r in instance.requests if r.id in self.start}

    def makespan(self, instance: Instance) -> int:
        return max(self.completion(instance).values(), default=0)

    def vector(self, instance: Instance) -> tuple[int, ...]:
        return tuple(self.start[r.id] for r in instance.requests)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "start": {str(k): v for k, v in sorted(self.start.items())}}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schedule":
        return cls({int(k): int(v) for k, v in data["start"].items()})


@dataclass(frozen=True)
class Metrics:
    tel: int
    avg_latency: Fraction
    makespan: int
    per_round_throughput: tuple[tuple[int, int], ...] = ()
    memory_timeline: tuple[tuple[int, int], ...] = ()

    def to_dict(self) -> dict:
        return {
            "tel": self.tel,
            "avg_latency": float(self.avg_latency),
            "avg_latency_exact": f"{self.avg_latency.numerator}/{self.avg_latency.denominator}",
            "makespan": self.makespan,
            "per_round_throughput": [list(x) for x in self.per_round_throughput],
            "memory_timeline": [list(x) for x in self.memory_timeline],
        }


def tel(schedule: Schedule, instance: Instance) -> int:
    total = 0
    for r in instance.requests:
        if r.id not in schedule.start:
            raise IncompleteScheduleError(f"incomplete schedule: request {r.id} has no start")
        total += schedule.start[r.id] + r.output_len - r.arrival
    return total


def tel_by_integration(schedule: Schedule, instance: Instance) -> int:
    """Sum over rounds of the number of arrived-but-incomplete requests.

    A request arriving at ``a`` and completing at ``c`` is counted in the
    ``c - a`` unit intervals ``(a, a+1], ..., (c-1, c]``.
    """
    if not instance.requests:
        return 0
    events: dict[int, int] = {}
    for r in instance.requests:
        if r.id not in schedule.start:
            raise IncompleteScheduleError(f"incomplete schedule: request {r.id} has no start")
        c = schedule.start[r.id] + r.output_len
        events[r.arrival] = events.get(r.arrival, 0) + 1
        events[c] = events.get(c, 0) - 1
    total = 0
    live = 0
    prev = None
    for t in sorted(events):
        if prev is not None:
            total += live * (t - prev)
        live += events[t]
        prev = t
    return total


def metrics_from_schedule(schedule: Schedule, instance: Instance) -> Metrics:
    total = tel(schedule, instance)
    n = instance.n
    return Metrics(
        tel=total,
        avg_latency=Fraction(total, n) if n else Fraction(0),
        makespan=schedule.makespan(instance),
        memory_timeline=tuple(occupancy_profile(schedule, instance).items()),
    )


def occupancy_profile(schedule: Schedule, instance: Instance) -> dict[int, int]:
    """Round -> occupancy for every round in which some request is active."""
    prof: dict[int, int] = {}
    for r in instance.requests:
        p = schedule.start[r.id]
        for k in range(1, r.output_len + 1):
            prof[p + k] = prof.get(p + k, 0) + r.prompt_size + k
    return dict(sorted(prof.items()))


@dataclass(frozen=True)
class Violation:
    kind: str  # "early_start" | "memory" | "missing"
    request: int | None = None
    round: int | None = None
    occupancy: int | None = None

    def __str__(self) -> str:
        if self.kind == "memory":
            return f"memory limit exceeded at round {self.round}: occupancy {self.occupancy}"
        if self.kind == "early_start":
            return f"request {self.request} starts before its arrival"
        return f"request {self.request} has no start"


def validate_schedule(schedule: Schedule, instance: Instance) -> Violation | None:
    """Return ``None`` when the schedule is feasible, else the first violation.

    Arrival violations are reported before memory violations; memory
    violations report the earliest offending round.
    """
    for r in instance.requests:
        if r.id not in schedule.start:
            return Violation("missing", request=r.id)
    for r in instance.requests:
        if schedule.start[r.id] < r.arrival:
            return Violation("early_start", request=r.id)
    for t, occ in occupancy_profile(schedule, instance).items():
        if occ > instance.memory_limit:
            return Violation("memory", round=t, occupancy=occ)
    return None


def requests_by_id(requests: Sequence[Request]) -> dict[int, Request]:
    return {r.id: r for r in requests}
