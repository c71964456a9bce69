"""Workload generation and trace ingestion.

All randomness flows through ``numpy.random.Generator(PCG64(seed))``.
Poisson counts are drawn by inverse-transform sampling from a single
uniform per draw, so the stream consumption is fixed and documented
rather than depending on numpy's internal Poisson algorithm.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Instance, KvschedError, Request

log = logging.getLogger(__name__)

MODELS = ("all_at_once", "poisson", "adversarial", "trace")

# Summary statistics of the conversational dataset used for the real-data
# experiments (word counts); the shipped corpus generator targets them.
PROMPT_MEAN, PROMPT_MEDIAN = 40.62, 11.0
OUTPUT_MEAN, OUTPUT_MEDIAN = 85.32, 45.0
TOKEN_CAP = 2048
REAL_MEMORY_LIMIT = 16492
HIGH_DEMAND_LAMBDA = 50.0
LOW_DEMAND_LAMBDA = 10.0
NOISE_PRESETS = (0.2, 0.5, 0.8)


class GenSpecError(KvschedError, ValueError):
    pass


class TraceFormatError(KvschedError, ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def poisson_inverse(rng: np.random.Generator, lam: float) -> int:
    """One Poisson(lam) draw by inverse transform on a single uniform."""
    if lam < 0:
        raise GenSpecError("Poisson rate must be non-negative")
    u = rng.random()
    k = 0
    p = math.exp(-lam)
    cdf = p
    while u > cdf:
        k += 1
        p *= lam / k
        cdf += p
        if p == 0.0 and k > lam:  # float tail exhausted
            break
    return k


def _interval(name: str, value) -> tuple:
    if value is None:
        return None
    lo, hi = value
    if lo > hi:
        raise GenSpecError(f"{name} is empty: [{lo}, {hi}]")
    return (lo, hi)


@dataclass(frozen=True)
class GenSpec:
    model: str = "all_at_once"
    seed: int = 0
    M_range: tuple[int, int] = (30, 50)
    s_range: tuple[int, int] = (1, 5)
    o_range: tuple[int, int] | None = None  # None: [1, M - s]
    n_range: tuple[int, int] = (40, 60)
    T_range: tuple[int, int] = (40, 60)
    lambda_range: tuple[float, float] = (0.5, 1.5)
    epsilon: float = 0.0
    noise_mode: str = "two_sided"

    def __post_init__(self) -> None:
        if self.model not in MODELS:
            raise GenSpecError(f"unknown generator model {self.model!r}")
        for name in ("M_range", "s_range", "o_range", "n_range", "T_range", "lambda_range"):
            object.__setattr__(self, name, _interval(name, getattr(self, name)))
        if self.M_range[0] < 2:
            raise GenSpecError("M_range must start at 2 or more")
        if self.s_range[0] < 1:
            raise GenSpecError("s_range must start at 1 or more")
        if self.s_range[1] >= self.M_range[0]:
            raise GenSpecError(
                f"contradictory ranges: s up to {self.s_range[1]} leaves no room for output "
                f"when M can be as small as {self.M_range[0]}"
            )
        if self.o_range is not None and self.o_range[0] < 1:
            raise GenSpecError("o_range must start at 1 or more")
        if self.n_range[0] < 0 or self.T_range[0] < 1 or self.lambda_range[0] < 0:
            raise GenSpecError("n_range, T_range and lambda_range must be non-negative")
        if self.epsilon < 0:
            raise GenSpecError("epsilon must be >= 0")
        if self.noise_mode not in ("two_sided", "overestimate"):
            raise GenSpecError(f"unknown noise mode {self.noise_mode!r}")
        if self.noise_mode == "two_sided" and self.epsilon >= 1:
            raise GenSpecError("two-sided noise needs epsilon < 1")

    def with_seed(self, seed: int) -> "GenSpec":
        return replace(self, seed=seed)


def _draw_size(rng: np.random.Generator, spec: GenSpec, M: int) -> tuple[int, int]:
    s = int(rng.integers(spec.s_range[0], spec.s_range[1] + 1))
    if spec.o_range is None:
        lo, hi = 1, M - s
    else:
        lo, hi = spec.o_range[0], min(spec.o_range[1], M - s)
        if hi < lo:
            raise GenSpecError(f"o_range {spec.o_range} does not fit under M={M} with s={s}")
    o = int(rng.integers(lo, hi + 1))
    return s, o


def gen_all_at_once(spec: GenSpec) -> Instance:
    """Every request released at round 0."""
    rng = make_rng(spec.seed)
    M = int(rng.integers(spec.M_range[0], spec.M_range[1] + 1))
    n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
    reqs = []
    for i in range(n):
        s, o = _draw_size(rng, spec, M)
        reqs.append(Request(i, 0, s, o))
    return _finish(Instance(M, tuple(reqs)), spec)


def gen_poisson(spec: GenSpec) -> Instance:
    """Poisson(lambda) arrivals in each round ``t = 1..T``."""
    rng = make_rng(spec.seed)
    M = int(rng.integers(spec.M_range[0], spec.M_range[1] + 1))
    T = int(rng.integers(spec.T_range[0], spec.T_range[1] + 1))
    lam = float(rng.uniform(spec.lambda_range[0], spec.lambda_range[1]))
    reqs = []
    for t in range(1, T + 1):
        for _ in range(poisson_inverse(rng, lam)):
            s, o = _draw_size(rng, spec, M)
            reqs.append(Request(len(reqs), t, s, o))
    return _finish(Instance(M, tuple(reqs)), spec)


def _finish(inst: Instance, spec: GenSpec) -> Instance:
    if spec.epsilon > 0:
        inst = apply_prediction_noise(inst, spec.epsilon, spec.noise_mode, spec.seed + 1)
    return inst


def _ceil_half_sqrt(M: int) -> int:
    """Smallest k with 2k >= sqrt(M)."""
    k = math.isqrt(M) // 2
    while 4 * k * k < M:
        k += 1
    return k


def adversarial_release(M: int, b: int) -> int:
    return b + M - _ceil_half_sqrt(M)


def gen_adversarial(M: int, b: int = 0) -> Instance:
    """One long request at round 0 and ``M/2`` unit requests released late.

    The short requests arrive at ``floor(b + M - sqrt(M)/2)``, shortly before
    a long request started at ``b`` would finish, so they find almost all
    memory taken.
    """
    if M < 4:
        raise GenSpecError("adversarial instance needs M >= 4")
    if b < 0:
        raise GenSpecError("b must be >= 0")
    release = adversarial_release(M, b)
    reqs = [Request(0, 0, 1, M - 1)]
    reqs += [Request(i, release, 1, 1) for i in range(1, M // 2 + 1)]
    return Instance(M, tuple(reqs))


def generate(spec: GenSpec) -> Instance:
    if spec.model == "all_at_once":
        return gen_all_at_once(spec)
    if spec.model == "poisson":
        return gen_poisson(spec)
    raise GenSpecError(f"model {spec.model!r} needs its own entry point")


def apply_prediction_noise(instance: Instance, epsilon: float, mode: str = "two_sided",
                           seed: int = 0, *, cap_to_memory: bool = True) -> Instance:
    """Replace predictions with noisy versions of the true output length.

    ``two_sided``: ``õ = max(1, round(U[(1-eps)o, (1+eps)o]))`` (halves round up).
    ``overestimate``: ``õ = floor(U[o, (1+eps)o])`` so ``o <= õ <= (1+eps)o``.
    With ``cap_to_memory`` the prediction is clipped to ``M - s`` (a request
    the scheduler believes can never fit would otherwise wait forever); the
    clip never goes below the true length.
    """
    if epsilon < 0:
        raise GenSpecError("epsilon must be >= 0")
    if mode == "two_sided" and epsilon >= 1:
        raise GenSpecError("two-sided noise needs epsilon < 1 (predictions could reach 0)")
    if mode not in ("two_sided", "overestimate"):
        raise GenSpecError(f"unknown noise mode {mode!r}")
    rng = make_rng(seed)
    out = []
    for r in instance.requests:
        o = r.output_len
        if mode == "two_sided":
            u = rng.uniform((1 - epsilon) * o, (1 + epsilon) * o)
            pred = max(1, math.floor(u + 0.5))
        else:
            u = rng.uniform(o, (1 + epsilon) * o)
            pred = max(o, math.floor(u))
        if cap_to_memory:
            pred = max(min(pred, instance.memory_limit - r.prompt_size), min(o, pred))
        out.append(Request(r.id, r.arrival, r.prompt_size, o, pred))
    return Instance(instance.memory_limit, tuple(out))


@dataclass(frozen=True)
class TraceRecord:
    id: int
    prompt_tokens: int
    output_tokens: int
    arrival_seconds: Fraction | None = None

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise TraceFormatError(f"record {self.id}: token counts must be >= 1")

    def to_dict(self) -> dict:
        d = {"id": self.id, "prompt_tokens": self.prompt_tokens, "output_tokens": self.output_tokens}
        if self.arrival_seconds is not None:
            d["arrival"] = float(self.arrival_seconds)
        return d


class TraceRecords(list):
    """List of records plus the number of zero-token rows skipped on load."""

    skipped: int = 0


def load_trace(path, sampling: str | tuple = "all") -> TraceRecords:
    """Read a JSONL trace.  ``sampling`` is ``"all"`` or ``("random_k", k, seed)``."""
    out = TraceRecords()
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rid = int(row["id"])
                pt = int(row["prompt_tokens"])
                ot = int(row["output_tokens"])
                arr = row.get("arrival")
                arr = Fraction(str(arr)) if arr is not None else None
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceFormatError(f"{path}: line {lineno}: malformed row ({exc})") from exc
            if pt < 0 or ot < 0:
                raise TraceFormatError(f"{path}: line {lineno}: negative token count")
            if pt == 0 or ot == 0:
                skipped += 1
                continue
            out.append(TraceRecord(rid, pt, ot, arr))
    if skipped:
        log.warning("skipped %d zero-token rows in %s", skipped, path)
    out.sort(key=lambda r: (r.arrival_seconds if r.arrival_seconds is not None else 0, r.id))
    if sampling != "all":
        kind, k, seed = sampling
        if kind != "random_k":
            raise TraceFormatError(f"unknown sampling {kind!r}")
        rng = make_rng(seed)
        picks = sorted(rng.choice(len(out), size=min(k, len(out)), replace=False).tolist())
        sub = TraceRecords(out[i] for i in picks)
        sub.skipped = skipped
        return sub
    out.skipped = skipped
    return out


def write_trace(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def _lognormal_params(mean: float, median: float) -> tuple[float, float]:
    mu = math.log(median)
    sigma = math.sqrt(2 * math.log(mean / median))
    return mu, sigma


def synth_trace_records(n: int, seed: int, *, prompt_mean: float = PROMPT_MEAN,
                        prompt_median: float = PROMPT_MEDIAN, output_mean: float = OUTPUT_MEAN,
                        output_median: float = OUTPUT_MEDIAN, cap: int = TOKEN_CAP
                        ) -> list[TraceRecord]:
    """Synthetic conversation corpus with log-normal token counts.

    Each log-normal is fitted so its median and mean match the targets; draws
    are rounded to integers and clipped to ``[1, cap]``.
    """
    rng = make_rng(seed)
    pm, ps = _lognormal_params(prompt_mean, prompt_median)
    om, os_ = _lognormal_params(output_mean, output_median)
    prompts = np.clip(np.rint(rng.lognormal(pm, ps, n)), 1, cap).astype(int)
    outputs = np.clip(np.rint(rng.lognormal(om, os_, n)), 1, cap).astype(int)
    return [TraceRecord(i, int(p), int(o)) for i, (p, o) in enumerate(zip(prompts, outputs))]


def trace_to_instance(records: Sequence[TraceRecord], lambda_per_second: float,
                      rounds_per_second: float, seed: int,
                      memory_limit: int = REAL_MEMORY_LIMIT) -> Instance:
    """Poisson arrivals in seconds, mapped to rounds by ``floor(sec * rps)``."""
    if lambda_per_second <= 0 or rounds_per_second <= 0:
        raise GenSpecError("rates must be positive")
    rng = make_rng(seed)
    gaps = rng.exponential(1.0 / lambda_per_second, len(records))
    secs = np.cumsum(gaps)
    rows = []
    for rec, sec in zip(records, secs):
        rnd = math.floor(sec * rounds_per_second)
        rows.append((rnd, rec.id, rec))
    rows.sort(key=lambda x: (x[0], x[1]))
    reqs = [Request(k, rnd, rec.prompt_tokens, rec.output_tokens)
            for k, (rnd, _rid, rec) in enumerate(rows)]
    return Instance(memory_limit, tuple(reqs))


def save_instance(instance: Instance, path) -> None:
    Path(path).write_text(json.dumps(instance.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_instance(path) -> Instance:
    return Instance.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TraceSpec:
    """Parameters for building a real-data style instance from a trace."""

    n: int = 1000
    lambda_per_second: float = HIGH_DEMAND_LAMBDA
    rounds_per_second: float = 20.0
    memory_limit: int = REAL_MEMORY_LIMIT
    path: str | None = None
    corpus_size: int = 10_000
    seed: int = 0
    epsilon: float = 0.0
    noise_mode: str = "two_sided"
    extra: dict = field(default_factory=dict)

    def build(self, seed: int | None = None) -> Instance:
        seed = self.seed if seed is None else seed
        if self.path:
            records = load_trace(self.path)
        else:
            records = synth_trace_records(self.corpus_size, seed)
        rng = make_rng(seed + 7)
        k = min(self.n, len(records))
        picks = sorted(rng.choice(len(records), size=k, replace=False).tolist())
        inst = trace_to_instance([records[i] for i in picks], self.lambda_per_second,
                                 self.rounds_per_second, seed + 13, self.memory_limit)
        if self.epsilon > 0:
            inst = apply_prediction_noise(inst, self.epsilon, self.noise_mode, seed + 29)
        return inst
