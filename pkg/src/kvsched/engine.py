"""Discrete-time simulation of batched LLM inference under a KV-cache limit.

Each round ``t``:

1. requests with ``arrival <= t`` join the waiting queue;
2. the policy picks admissions, which start at ``t``; it sees in-flight
   requests through :func:`~kvsched.kvmemory.observed`, so one that has
   outrun its prediction is projected to keep holding memory;
3. the memory the batch needs in round ``t+1`` is computed from *true*
   lengths; if it exceeds ``M`` the policy's overflow handler evicts
   requests (progress discarded, arrival kept) before the batch runs;
4. the batch runs: each member emits one token, new members also consume
   their prompt;
5. members that reached their true output length complete at ``t+1``.

Rounds are the unit of latency.  A :class:`DurationModel` maps rounds to
wall-clock seconds for throughput reporting only.
"""

from __future__ import annotations

import bisect
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence

from .core import Instance, KvschedError, Metrics, Request, Schedule, tel
from .kvmemory import InFlight, observed
from .schedulers import PolicyConfig, PolicyRuntime

SCHEMA_VERSION = 1


class LivelockError(KvschedError, RuntimeError):
    """Raised when a run stops making progress; carries a state snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class DurationModelError(KvschedError, ValueError):
    pass


@dataclass(frozen=True)
class DurationModel:
    kind: str = "unit"
    c0: float = 1.0
    c1: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("unit", "affine"):
            raise DurationModelError(f"duration kind must be 'unit' or 'affine', got {self.kind!r}")
        if self.kind == "affine" and (self.c0 <= 0 or self.c1 < 0):
            raise DurationModelError("affine durations need c0 > 0 and c1 >= 0")

    def round_seconds(self, tokens: int) -> float:
        if self.kind == "unit":
            return 1.0
        return self.c0 + self.c1 * tokens

    @property
    def idle_seconds(self) -> float:
        return 1.0 if self.kind == "unit" else self.c0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "c0": self.c0, "c1": self.c1}


@dataclass
class SimState:
    now: int
    in_flight: list[InFlight]
    waiting: list[Request]
    occupancy: int
    memory_limit: int
    evictions: int = 0
    events: list = field(default_factory=list)

    def recompute_occupancy(self) -> int:
        return sum(f.occupancy_at(self.now) for f in self.in_flight)

    def snapshot(self) -> dict:
        return {
            "now": self.now,
            "in_flight": [(f.request.id, f.start) for f in self.in_flight],
            "waiting": [r.id for r in self.waiting],
            "occupancy": self.occupancy,
            "evictions": self.evictions,
        }


@dataclass
class RunReport:
    instance_size: int
    memory_limit: int
    policy: PolicyConfig
    duration: DurationModel
    metrics: Metrics
    schedule: Schedule
    completion: dict[int, int]
    clearing_events: list[tuple[int, tuple[int, ...]]]
    evictions: int
    round_log: list[tuple[int, float, int]]  # (round, start seconds, tokens processed)
    arrival_seconds: dict[int, float]
    completion_seconds: dict[int, float]
    arrival_tokens: dict[int, int]
    eq5_evaluations: dict[int, int]
    events: list[tuple]
    seed: int | None = None
    wall_time: float = 0.0

    @property
    def tel(self) -> int:
        return self.metrics.tel

    @property
    def avg_latency(self) -> Fraction:
        return self.metrics.avg_latency

    @property
    def avg_latency_seconds(self) -> float:
        if not self.completion_seconds:
            return 0.0
        total = sum(self.completion_seconds[i] - self.arrival_seconds[i] for i in self.completion_seconds)
        return total / len(self.completion_seconds)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "policy": self.policy.to_dict(),
            "duration": self.duration.to_dict(),
            "seed": self.seed,
            "n": self.instance_size,
            "memory_limit": self.memory_limit,
            "metrics": self.metrics.to_dict(),
            "avg_latency_seconds": self.avg_latency_seconds,
            "evictions": self.evictions,
            "clearing_events": [[r, list(ids)] for r, ids in self.clearing_events],
            "schedule": self.schedule.to_dict()["start"],
            "wall_time": self.wall_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def events_jsonl(self) -> str:
        lines = [json.dumps({"schema_version": SCHEMA_VERSION, "kind": "header",
                             "policy": self.policy.label})]
        for kind, rnd, payload in self.events:
            lines.append(json.dumps({"kind": kind, "round": rnd, **payload}, sort_keys=True))
        return "\n".join(lines) + "\n"


def default_horizon_cap(instance: Instance) -> int:
    return 10 * instance.serial_horizon() + 10


def run(instance: Instance, policy: PolicyConfig, duration: DurationModel | None = None,
        horizon_cap: int | None = None, *, stall_limit: int | None = None,
        record_events: bool = True, check_invariants: bool = False,
        seed: int | None = None) -> RunReport:
    duration = duration or DurationModel()
    reqs = instance.requests
    M = instance.memory_limit
    cap = horizon_cap if horizon_cap is not None else default_horizon_cap(instance)
    max_o = max((r.output_len for r in reqs), default=1)
    stall = stall_limit if stall_limit is not None else 20 * max_o + 100
    runtime = PolicyRuntime(policy)
    wall0 = time.perf_counter()

    events: list[tuple] = []
    emit = events.append if record_events else (lambda _e: None)
    waiting: list[Request] = []
    wait_keys: list[tuple[int, int]] = []
    in_flight: dict[int, InFlight] = {}
    completion: dict[int, int] = {}
    final_start: dict[int, int] = {}
    clearing: list[tuple[int, tuple[int, ...]]] = []
    round_log: list[tuple[int, float, int]] = []
    timeline: list[tuple[int, int]] = []
    throughput: list[tuple[int, int]] = []
    arrival_s: dict[int, float] = {}
    completion_s: dict[int, float] = {}
    evictions = 0

    def enqueue(r: Request) -> None:
        k = (r.arrival, r.id)
        pos = bisect.bisect_left(wait_keys, k)
        wait_keys.insert(pos, k)
        waiting.insert(pos, r)

    nxt = 0
    t = 0
    clock = 0.0
    occ = 0  # actual memory held at round t by in-flight requests
    last_progress = 0
    n = len(reqs)
    while len(completion) < n:
        if not in_flight and not waiting and nxt < n and reqs[nxt].arrival > t:
            gap = reqs[nxt].arrival - t
            clock += gap * duration.idle_seconds
            t += gap
            last_progress = t
        while nxt < n and reqs[nxt].arrival <= t:
            r = reqs[nxt]
            enqueue(r)
            arrival_s[r.id] = clock
            emit(("arrival", t, {"id": r.id}))
            nxt += 1

        state = SimState(t, [observed(f, t) for f in in_flight.values()], waiting, occ, M,
                         evictions)
        if check_invariants:
            assert state.recompute_occupancy() == occ, (t, occ, state.recompute_occupancy())
        if t > cap or t - last_progress > stall:
            raise LivelockError(
                f"livelock suspected at round {t} ({len(completion)}/{n} complete)",
                state.snapshot(),
            )

        decision = runtime.select(state)
        admitted = set(decision.admit)
        demand = occ + len(in_flight)
        if admitted:
            keep_w, keep_k = [], []
            for r, k in zip(waiting, wait_keys):
                if r.id in admitted:
                    in_flight[r.id] = InFlight(r, t)
                    demand += r.prompt_size + 1
                else:
                    keep_w.append(r)
                    keep_k.append(k)
            waiting[:] = keep_w
            wait_keys[:] = keep_k
            emit(("admit", t, {"ids": list(decision.admit)}))

        if demand > M:
            emit(("overflow", t, {"occupancy": demand}))
            victims = runtime.overflow(list(in_flight.values()), M, t + 1)
            for vid in sorted(victims):
                f = in_flight.pop(vid)
                demand -= f.occupancy_at(t + 1)
                enqueue(f.request)
            evictions += len(victims)
            clearing.append((t, tuple(sorted(victims))))
            emit(("evict", t, {"ids": sorted(victims)}))
            if demand > M:  # pragma: no cover - handlers always restore feasibility
                raise KvschedError("overflow handler left memory above the limit")

        tokens = 0
        done = []
        for rid, f in in_flight.items():
            tokens += 1
            if f.start == t:
                tokens += f.request.prompt_size
            if f.true_end == t + 1:
                done.append(rid)
        if in_flight:
            emit(("token", t, {"ids": list(in_flight)}))
        dt = duration.round_seconds(tokens)
        round_log.append((t, clock, tokens))
        throughput.append((t, tokens))
        timeline.append((t + 1, demand))
        clock += dt

        released = 0
        for rid in done:
            f = in_flight.pop(rid)
            released += f.occupancy_at(t + 1)
            completion[rid] = t + 1
            completion_s[rid] = clock
            final_start[rid] = f.start
            emit(("complete", t + 1, {"id": rid}))
        if done:
            last_progress = t + 1
        occ = demand - released
        t += 1

    schedule = Schedule(dict(sorted(final_start.items())))
    total = tel(schedule, instance) if n else 0
    metrics = Metrics(
        tel=total,
        avg_latency=Fraction(total, n) if n else Fraction(0),
        makespan=max(completion.values(), default=0),
        per_round_throughput=tuple(throughput),
        memory_timeline=tuple(timeline),
    )
    return RunReport(
        instance_size=n,
        memory_limit=M,
        policy=policy,
        duration=duration,
        metrics=metrics,
        schedule=schedule,
        completion=completion,
        clearing_events=clearing,
        evictions=evictions,
        round_log=round_log,
        arrival_seconds=arrival_s,
        completion_seconds=completion_s,
        arrival_tokens={r.id: r.prompt_size + r.output_len for r in reqs},
        eq5_evaluations=dict(runtime.counter.per_round),
        events=events,
        seed=seed,
        wall_time=time.perf_counter() - wall0,
    )


@dataclass(frozen=True)
class ThroughputSeries:
    processed: list[tuple[float, int]]
    arrivals: list[tuple[float, int]]

    def __iter__(self):
        return iter(self.processed)

    def __len__(self) -> int:
        return len(self.processed)


def throughput_series(report: RunReport, window: float = 1.0) -> ThroughputSeries:
    """Tokens processed per wall-clock window (attributed to the round's start).

    A newly admitted request contributes its prompt plus one token in its
    first round, so the series sums to ``sum(s_i + o_i)`` over the final
    attempts plus any work discarded by evictions.
    """
    if report.duration.kind != "affine":
        raise DurationModelError("throughput requires a wall-clock duration model")
    if window <= 0:
        raise DurationModelError("window must be positive")

    def bucket(pairs: Iterable[tuple[float, int]]) -> list[tuple[float, int]]:
        acc: dict[int, int] = {}
        for sec, tok in pairs:
            k = int(sec // window)
            acc[k] = acc.get(k, 0) + tok
        return [(k * window, acc[k]) for k in sorted(acc)]

    processed = bucket((start, tok) for _r, start, tok in report.round_log)
    arrivals = bucket((report.arrival_seconds[i], report.arrival_tokens[i])
                      for i in sorted(report.arrival_seconds))
    return ThroughputSeries(processed, arrivals)


class NotOptimalError(KvschedError):
    def __init__(self, message: str, lower: Fraction, upper: Fraction):
        super().__init__(message)
        self.lower = lower
        self.upper = upper


def latency_ratio(instance: Instance, policy: PolicyConfig, time_budget: float = 10.0) -> Fraction:
    """TEL(policy) / TEL(hindsight optimum); raises when optimality is not proven."""
    from .hindsight import solve_ip

    rep = run(instance, policy, record_events=False)
    if instance.n == 0:
        return Fraction(1)
    _sched, bound = solve_ip(instance, time_budget=time_budget)
    if not bound.optimal:
        raise NotOptimalError(
            "hindsight optimum not proven within the time budget",
            Fraction(rep.tel) / bound.upper,
            Fraction(rep.tel) / max(bound.lower_int, 1),
        )
    return Fraction(rep.tel, bound.upper)


def write_events_jsonl(report: RunReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.events_jsonl())


def occupancy_series(report: RunReport) -> Sequence[tuple[int, int]]:
    return report.metrics.memory_timeline


def run_many(instance: Instance, policies: Sequence[PolicyConfig], **kw: Any) -> list[RunReport]:
    return [run(instance, p, **kw) for p in policies]
