"""Online admission policies and overflow handling.

Every policy maps a :class:`~kvsched.engine.SimState` to the ordered list of
request ids to start this round.  In-flight requests always continue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core import KvschedError, Request
from .kvmemory import EvalCounter, FeasibilityQuery, InFlight, ProjectionProfile, is_feasible

if TYPE_CHECKING:  # pragma: no cover
    from .engine import SimState

KINDS = ("mcsf", "mc_benchmark", "alpha_protection", "alpha_beta_clearing", "fcfs")


class PolicyConfigError(KvschedError, ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    alpha: float = 0.0
    beta: float = 1.0
    rng_seed: int = 0
    name: str = ""
    impl: str = "fast"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise PolicyConfigError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.alpha < 1:
            raise PolicyConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.kind == "alpha_beta_clearing" and not 0 < self.beta <= 1:
            raise PolicyConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.kind == "fcfs" and self.alpha != 0:
            raise PolicyConfigError("fcfs admits on the raw memory limit; alpha must be 0")
        if self.impl not in ("fast", "reference"):
            raise PolicyConfigError(f"impl must be 'fast' or 'reference', got {self.impl!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "alpha_protection":
            return f"alpha_protection(a={self.alpha:g})"
        if self.kind == "alpha_beta_clearing":
            return f"alpha_beta_clearing(a={self.alpha:g},b={self.beta:g})"
        if self.kind in ("mcsf", "mc_benchmark") and self.alpha:
            return f"{self.kind}(a={self.alpha:g})"
        return self.kind

    def budget(self, memory_limit: int) -> int:
        """``floor((1 - alpha) * M)`` computed exactly from the decimal alpha."""
        frac = 1 - Fraction(str(self.alpha))
        return math.floor(frac * memory_limit)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta,
                "rng_seed": self.rng_seed, "name": self.label}


@dataclass(frozen=True)
class PolicyDecision:
    admit: tuple[int, ...] = ()
    evaluations: int = 0


def _mc_order(kind: str, waiting: Sequence[Request]) -> list[Request]:
    if kind == "mcsf":
        return sorted(waiting, key=lambda r: (r.predicted_len, r.arrival, r.id))
    return sorted(waiting, key=lambda r: (r.arrival, r.id))


def _prefix_select(order: Sequence[Request], now: int, in_flight: Sequence[InFlight],
                   budget: int, impl: str, counter: EvalCounter | None) -> PolicyDecision:
    if impl == "reference":
        admitted: list[Request] = []
        local = EvalCounter()
        for cand in order:
            q = FeasibilityQuery(now, tuple(in_flight), (*admitted, cand), budget)
            if not is_feasible(q, local):
                break
            admitted.append(cand)
        if counter is not None:
            counter.add(now, local.total)
        return PolicyDecision(tuple(r.id for r in admitted), local.total)

    prof = ProjectionProfile(now, in_flight)
    ids = []
    for cand in order:
        if not prof.try_add(cand.prompt_size, cand.predicted_len, budget):
            break
        ids.append(cand.id)
    if counter is not None:
        counter.add(now, prof.checks)
    return PolicyDecision(tuple(ids), prof.checks)


def mcsf_select(state: "SimState", config: PolicyConfig | None = None,
                counter: EvalCounter | None = None) -> PolicyDecision:
    """Longest feasible prefix of the waiting set in ascending predicted length."""
    config = config or PolicyConfig("mcsf")
    order = _mc_order("mcsf", state.waiting)
    return _prefix_select(order, state.now, state.in_flight, config.budget(state.memory_limit),
                          config.impl, counter)


def mc_benchmark_select(state: "SimState", config: PolicyConfig | None = None,
                        counter: EvalCounter | None = None) -> PolicyDecision:
    config = config or PolicyConfig("mc_benchmark")
    order = _mc_order("mc_benchmark", state.waiting)
    return _prefix_select(order, state.now, state.in_flight, config.budget(state.memory_limit),
                          config.impl, counter)


def _myopic_select(state: "SimState", budget: int) -> PolicyDecision:
    used = state.occupancy
    ids = []
    for r in sorted(state.waiting, key=lambda r: (r.arrival, r.id)):
        need = r.prompt_size + 1
        if used + need > budget:
            break
        used += need
        ids.append(r.id)
    return PolicyDecision(tuple(ids), len(ids))


def alpha_protection_select(state: "SimState", config: PolicyConfig) -> PolicyDecision:
    """Admit in arrival order while current usage plus new prompts fits ``(1-alpha)M``."""
    return _myopic_select(state, config.budget(state.memory_limit))


def fcfs_select(state: "SimState", config: PolicyConfig | None = None) -> PolicyDecision:
    return _myopic_select(state, state.memory_limit)


def select(config: PolicyConfig, state: "SimState",
           counter: EvalCounter | None = None) -> PolicyDecision:
    if config.kind == "mcsf":
        return mcsf_select(state, config, counter)
    if config.kind == "mc_benchmark":
        return mc_benchmark_select(state, config, counter)
    if config.kind == "fcfs":
        return fcfs_select(state, config)
    return alpha_protection_select(state, config)


def _occupancy(active: Sequence[InFlight], t: int) -> int:
    return sum(f.occupancy_at(t) for f in active)


def handle_overflow(config: PolicyConfig, active: Sequence[InFlight],
                    rng: np.random.Generator | None, memory_limit: int,
                    at_round: int) -> set[int]:
    """Pick the ids to evict so that usage at ``at_round`` fits the memory limit.

    * ``mcsf``, ``mc_benchmark``, ``alpha_protection``: clear every active request.
    * ``alpha_beta_clearing``: evict each survivor with probability ``beta`` in
      passes (ordered by id) until the remainder fits; an empty pass re-draws.
    * ``fcfs``: evict the latest arrival first until the remainder fits.
    """
    if config.kind in ("mcsf", "mc_benchmark", "alpha_protection"):
        return {f.request.id for f in active}
    if config.kind == "fcfs":
        remaining = sorted(active, key=lambda f: (f.request.arrival, f.request.id))
        evicted: set[int] = set()
        while remaining and _occupancy(remaining, at_round) > memory_limit:
            evicted.add(remaining.pop().request.id)
        return evicted
    if rng is None:
        raise PolicyConfigError("alpha_beta_clearing needs an rng")
    remaining = sorted(active, key=lambda f: f.request.id)
    evicted = set()
    while remaining and _occupancy(remaining, at_round) > memory_limit:
        draws = rng.random(len(remaining))
        keep = []
        for f, u in zip(remaining, draws):
            if u < config.beta:
                evicted.add(f.request.id)
            else:
                keep.append(f)
        remaining = keep
    return evicted


@dataclass
class PolicyRuntime:
    """Binds a config to one run: owns the eviction RNG and evaluation counter."""

    config: PolicyConfig
    rng: np.random.Generator = field(init=False)
    counter: EvalCounter = field(default_factory=EvalCounter)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.config.rng_seed)

    def select(self, state: "SimState") -> PolicyDecision:
        return select(self.config, state, self.counter)

    def overflow(self, active: Sequence[InFlight], memory_limit: int, at_round: int) -> set[int]:
        return handle_overflow(self.config, active, self.rng, memory_limit, at_round)
