"""Experiment configs and the trial runner behind ``kvsched run``.

A config is a TOML file.  Unknown keys are rejected and every validation
error names the line it comes from.  Each trial cell is a pure function of
``(config, cell index)``, so any row of ``results.csv`` can be replayed on
its own with :func:`run_cell`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .core import Instance, KvschedError
from .engine import DurationModel, LivelockError, run, throughput_series
from .hindsight import solve_ip
from .schedulers import KINDS, PolicyConfig
from .workloads import GenSpec, TraceSpec, gen_adversarial, generate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HINDSIGHT_MAX_N = 80

RESULT_COLUMNS = (
    "trial", "seed", "policy", "model", "n", "M", "tel", "avg_latency",
    "avg_latency_seconds", "makespan", "evictions", "clearing_events", "livelock",
    "opt_lower", "opt_upper", "optimal", "ratio", "ratio_upper", "solver_status",
)
TIMING_COLUMNS = ("trial", "n", "policy", "sim_seconds", "solver_seconds")
TIMELINE_COLUMNS = ("trial", "n", "policy", "round", "occupancy")
THROUGHPUT_COLUMNS = ("trial", "n", "policy", "window_start", "tokens", "arrival_tokens")


class ConfigError(KvschedError, ValueError):
    pass


# --------------------------------------------------------------------------
# config schema


@dataclass(frozen=True)
class HindsightConfig:
    time_budget: float = 10.0
    backend: str = "cpsat"
    workers: int = 8


@dataclass(frozen=True)
class OutputConfig:
    memory_timeline: bool = False
    throughput: bool = False
    throughput_window: float = 1.0
    figures: bool = True


@dataclass(frozen=True)
class AdversarialSpec:
    M_values: tuple[int, ...] = (16, 64, 256)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    generator: Any  # GenSpec | TraceSpec | AdversarialSpec
    policies: tuple[PolicyConfig, ...]
    trials: int = 1
    seed: int = 0
    compute_hindsight: bool = False
    duration: DurationModel = DurationModel()
    hindsight: HindsightConfig = HindsightConfig()
    output: OutputConfig = OutputConfig()
    n_values: tuple[int, ...] = ()
    model: str = "all_at_once"
    jobs: int | None = None
    source: str = ""

    def cells(self) -> list[tuple[int, int | None]]:
        if self.model == "trace":
            return [(t, n) for t in range(self.trials) for n in self.n_values]
        return [(t, None) for t in range(self.trials)]

    def with_overrides(self, *, seed: int | None = None, trials: int | None = None,
                       jobs: int | None = None) -> "ExperimentConfig":
        kw = dict(self.__dict__)
        if seed is not None:
            kw["seed"] = seed
        if trials is not None:
            kw["trials"] = trials
        if jobs is not None:
            kw["jobs"] = jobs
        return ExperimentConfig(**kw)


_TOP_KEYS = {"name", "trials", "seed", "compute_hindsight", "jobs", "generator", "policies",
             "duration", "hindsight", "output"}
_GEN_KEYS = {
    "all_at_once": {"model", "M_range", "s_range", "o_range", "n_range", "epsilon", "noise_mode"},
    "poisson": {"model", "M_range", "s_range", "o_range", "T_range", "lambda_range", "epsilon",
                "noise_mode"},
    "adversarial": {"model", "M_values"},
    "trace": {"model", "n_values", "lambda_per_second", "rounds_per_second", "memory_limit",
              "path", "corpus_size", "epsilon", "noise_mode"},
}
_POLICY_KEYS = {"kind", "alpha", "beta", "rng_seed", "name"}
_DURATION_KEYS = {"kind", "c0", "c1"}
_HINDSIGHT_KEYS = {"time_budget", "backend", "workers"}
_OUTPUT_KEYS = {"memory_timeline", "throughput", "throughput_window", "figures"}


class _LineIndex:
    """Maps (table path, key) to the line where it is written."""

    _table = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-]+)\s*\]\]?")
    _key = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")

    def __init__(self, text: str):
        self.lines: dict[tuple[str, str], int] = {}
        self.tables: dict[str, int] = {}
        counts: dict[str, int] = {}
        current = ""
        for lineno, line in enumerate(text.splitlines(), start=1):
            m = self._table.match(line)
            if m:
                name = m.group(2)
                if m.group(1) == "[[":
                    idx = counts.get(name, 0)
                    counts[name] = idx + 1
                    name = f"{name}[{idx}]"
                current = name
                self.tables.setdefault(current, lineno)
                continue
            m = self._key.match(line)
            if m:
                self.lines.setdefault((current, m.group(1)), lineno)

    def line(self, table: str, key: str | None = None) -> int | None:
        if key is not None and (table, key) in self.lines:
            return self.lines[(table, key)]
        return self.tables.get(table)


def _fail(path: str, idx: _LineIndex, table: str, key: str | None, msg: str) -> ConfigError:
    line = idx.line(table, key)
    where = f"{path}:{line}" if line else path
    return ConfigError(f"{where}: {msg}")


def load_config(path) -> ExperimentConfig:
    path = str(path)
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text, path)


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    idx = _LineIndex(text)

    def check_keys(table: str, got: dict, allowed: set) -> None:
        for k in got:
            if k not in allowed:
                raise _fail(path, idx, table, k, f"unknown key {k!r} in [{table or 'top level'}]")

    def typed(table: str, got: dict, key: str, kind, default=None, required=False):
        if key not in got:
            if required:
                raise _fail(path, idx, table, None, f"missing required key {key!r}")
            return default
        val = got[key]
        ok = isinstance(val, kind) and not (kind in (int, (int, float)) and isinstance(val, bool))
        if not ok:
            raise _fail(path, idx, table, key, f"{key} has the wrong type ({type(val).__name__})")
        return val

    def pair(table: str, got: dict, key: str, default):
        if key not in got:
            return default
        val = got[key]
        if (not isinstance(val, list) or len(val) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val)):
            raise _fail(path, idx, table, key, f"{key} must be a two-element numeric list")
        if val[0] > val[1]:
            raise _fail(path, idx, table, key, f"{key} is empty: {val}")
        return tuple(val)

    check_keys("", data, _TOP_KEYS)
    name = typed("", data, "name", str, required=True)
    trials = typed("", data, "trials", int, 1)
    if trials < 1:
        raise _fail(path, idx, "", "trials", "trials must be >= 1")
    seed = typed("", data, "seed", int, 0)
    hind = typed("", data, "compute_hindsight", bool, False)
    jobs = typed("", data, "jobs", int, None)
    if jobs is not None and jobs < 1:
        raise _fail(path, idx, "", "jobs", "jobs must be >= 1")

    gen = typed("", data, "generator", dict, required=True)
    model = typed("generator", gen, "model", str, required=True)
    if model not in _GEN_KEYS:
        raise _fail(path, idx, "generator", "model", f"unknown generator model {model!r}")
    check_keys("generator", gen, _GEN_KEYS[model])
    n_values: tuple[int, ...] = ()
    try:
        if model in ("all_at_once", "poisson"):
            spec = GenSpec(
                model=model,
                seed=seed,
                M_range=pair("generator", gen, "M_range", (30, 50)),
                s_range=pair("generator", gen, "s_range", (1, 5)),
                o_range=pair("generator", gen, "o_range", None),
                n_range=pair("generator", gen, "n_range", (40, 60)),
                T_range=pair("generator", gen, "T_range", (40, 60)),
                lambda_range=pair("generator", gen, "lambda_range", (0.5, 1.5)),
                epsilon=float(typed("generator", gen, "epsilon", (int, float), 0.0)),
                noise_mode=typed("generator", gen, "noise_mode", str, "two_sided"),
            )
            if hind and model == "all_at_once" and spec.n_range[1] > HINDSIGHT_MAX_N:
                raise _fail(path, idx, "generator", "n_range",
                            f"compute_hindsight refuses n_range above {HINDSIGHT_MAX_N}")
        elif model == "adversarial":
            mv = typed("generator", gen, "M_values", list, [16, 64, 256])
            if not mv or not all(isinstance(v, int) and v >= 4 for v in mv):
                raise _fail(path, idx, "generator", "M_values", "M_values must be integers >= 4")
            spec = AdversarialSpec(tuple(mv))
        else:
            nv = typed("generator", gen, "n_values", list, [1000])
            if not nv or not all(isinstance(v, int) and v >= 1 for v in nv):
                raise _fail(path, idx, "generator", "n_values", "n_values must be positive integers")
            n_values = tuple(nv)
            if hind and max(nv) > HINDSIGHT_MAX_N:
                raise _fail(path, idx, "generator", "n_values",
                            f"compute_hindsight refuses traces above {HINDSIGHT_MAX_N} requests")
            spec = TraceSpec(
                n=max(nv),
                lambda_per_second=float(typed("generator", gen, "lambda_per_second", (int, float), 50.0)),
                rounds_per_second=float(typed("generator", gen, "rounds_per_second", (int, float), 5.0)),
                memory_limit=typed("generator", gen, "memory_limit", int, 16492),
                path=typed("generator", gen, "path", str, None),
                corpus_size=typed("generator", gen, "corpus_size", int, 10_000),
                seed=seed,
                epsilon=float(typed("generator", gen, "epsilon", (int, float), 0.0)),
                noise_mode=typed("generator", gen, "noise_mode", str, "two_sided"),
            )
            if spec.lambda_per_second <= 0 or spec.rounds_per_second <= 0:
                raise _fail(path, idx, "generator", "lambda_per_second", "rates must be positive")
    except KvschedError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise _fail(path, idx, "generator", None, str(exc)) from exc

    pols_raw = typed("", data, "policies", list, required=True)
    if not pols_raw:
        raise _fail(path, idx, "", "policies", "at least one policy is required")
    policies = []
    for i, p in enumerate(pols_raw):
        table = f"policies[{i}]"
        if not isinstance(p, dict):
            raise _fail(path, idx, table, None, "each policy must be a table")
        check_keys(table, p, _POLICY_KEYS)
        kind = typed(table, p, "kind", str, required=True)
        if kind not in KINDS:
            raise _fail(path, idx, table, "kind", f"unknown policy kind {kind!r}")
        try:
            policies.append(PolicyConfig(
                kind=kind,
                alpha=float(typed(table, p, "alpha", (int, float), 0.0)),
                beta=float(typed(table, p, "beta", (int, float), 1.0)),
                rng_seed=typed(table, p, "rng_seed", int, 0),
                name=typed(table, p, "name", str, ""),
            ))
        except KvschedError as exc:
            raise _fail(path, idx, table, None, str(exc)) from exc
    labels = [p.label for p in policies]
    if len(set(labels)) != len(labels):
        raise _fail(path, idx, "", "policies", f"policy labels must be unique: {labels}")

    dur_raw = typed("", data, "duration", dict, {})
    check_keys("duration", dur_raw, _DURATION_KEYS)
    try:
        duration = DurationModel(
            kind=typed("duration", dur_raw, "kind", str, "unit"),
            c0=float(typed("duration", dur_raw, "c0", (int, float), 1.0)),
            c1=float(typed("duration", dur_raw, "c1", (int, float), 0.0)),
        )
    except KvschedError as exc:
        raise _fail(path, idx, "duration", None, str(exc)) from exc

    h_raw = typed("", data, "hindsight", dict, {})
    check_keys("hindsight", h_raw, _HINDSIGHT_KEYS)
    hcfg = HindsightConfig(
        time_budget=float(typed("hindsight", h_raw, "time_budget", (int, float), 10.0)),
        backend=typed("hindsight", h_raw, "backend", str, "cpsat"),
        workers=typed("hindsight", h_raw, "workers", int, 8),
    )
    if hcfg.time_budget <= 0:
        raise _fail(path, idx, "hindsight", "time_budget", "time_budget must be positive")
    if hcfg.backend not in ("cpsat", "bnb"):
        raise _fail(path, idx, "hindsight", "backend", f"unknown backend {hcfg.backend!r}")

    o_raw = typed("", data, "output", dict, {})
    check_keys("output", o_raw, _OUTPUT_KEYS)
    ocfg = OutputConfig(
        memory_timeline=typed("output", o_raw, "memory_timeline", bool, False),
        throughput=typed("output", o_raw, "throughput", bool, False),
        throughput_window=float(typed("output", o_raw, "throughput_window", (int, float), 1.0)),
        figures=typed("output", o_raw, "figures", bool, True),
    )
    if ocfg.throughput and duration.kind != "affine":
        raise _fail(path, idx, "output", "throughput",
                    "throughput requires a wall-clock duration model (duration.kind = 'affine')")

    return ExperimentConfig(
        name=name, generator=spec, policies=tuple(policies), trials=trials, seed=seed,
        compute_hindsight=hind, duration=duration, hindsight=hcfg, output=ocfg,
        n_values=n_values, model=model, jobs=jobs, source=path,
    )


# --------------------------------------------------------------------------
# trial cells


@dataclass
class CellResult:
    rows: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    timelines: list[tuple] = field(default_factory=list)
    throughput: list[tuple] = field(default_factory=list)


def _num(x) -> str:
    """Deterministic text for numbers: ints verbatim, floats by shortest repr."""
    if x is None or x == "":
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, Fraction):
        if x.denominator == 1:
            return str(x.numerator)
        x = float(x)
    return repr(float(x))


def _instance_for(cfg: ExperimentConfig, trial: int, n: int | None) -> Instance:
    seed = cfg.seed + trial
    if cfg.model in ("all_at_once", "poisson"):
        return generate(cfg.generator.with_seed(seed))
    if cfg.model == "trace":
        spec = cfg.generator
        return TraceSpec(**{**spec.__dict__, "n": n}).build(seed)
    raise ConfigError("adversarial instances are built per policy")


def _hindsight(cfg: ExperimentConfig, inst: Instance) -> tuple[dict, float]:
    t0 = time.perf_counter()
    try:
        _s, bound = solve_ip(inst, cfg.hindsight.time_budget, backend=cfg.hindsight.backend,
                             workers=cfg.hindsight.workers)
    except KvschedError as exc:
        return {"solver_status": f"error:{exc}"}, time.perf_counter() - t0
    return {
        "opt_lower": bound.lower_int,
        "opt_upper": bound.upper,
        "optimal": bound.optimal,
        "solver_status": "optimal" if bound.optimal else ("clipped" if bound.clipped else "budget"),
    }, time.perf_counter() - t0


def _row(cfg, trial, n, policy, inst, rep, livelock, hind) -> dict:
    row = {k: "" for k in RESULT_COLUMNS}
    row.update(trial=trial, seed=cfg.seed + trial, policy=policy.label, model=cfg.model,
               n=inst.n, M=inst.memory_limit, livelock=livelock)
    if rep is not None:
        row.update(tel=rep.tel, avg_latency=rep.avg_latency,
                   avg_latency_seconds=rep.avg_latency_seconds if cfg.duration.kind == "affine" else "",
                   makespan=rep.metrics.makespan, evictions=rep.evictions,
                   clearing_events=len(rep.clearing_events))
    row.update(hind)
    if rep is not None and hind.get("opt_upper"):
        row["ratio"] = Fraction(rep.tel) / Fraction(hind["opt_upper"])
        if hind.get("opt_lower"):
            row["ratio_upper"] = Fraction(rep.tel) / Fraction(hind["opt_lower"])
    return {k: _num(v) if k not in ("policy", "model", "solver_status") else v
            for k, v in row.items()}


def _simulate(cfg, inst, policy):
    t0 = time.perf_counter()
    try:
        rep = run(inst, policy, cfg.duration, record_events=False)
        return rep, 0, time.perf_counter() - t0
    except LivelockError as exc:
        log.warning("%s: %s", policy.label, exc)
        return None, 1, time.perf_counter() - t0


def run_cell(cfg: ExperimentConfig, cell: tuple[int, int | None]) -> CellResult:
    trial, n = cell
    out = CellResult()
    if cfg.model == "adversarial":
        M = cfg.generator.M_values[trial % len(cfg.generator.M_values)]
        for pol in cfg.policies:
            probe = run(gen_adversarial(M, 0), pol, record_events=False, stall_limit=10 * M)
            b = probe.schedule.start[0]
            inst = gen_adversarial(M, b)
            rep, live, sim_s = _simulate(cfg, inst, pol)
            hind: dict = {}
            solve_s = 0.0
            if cfg.compute_hindsight and inst.n <= HINDSIGHT_MAX_N:
                hind, solve_s = _hindsight(cfg, inst)
            else:
                bound = Fraction(7 * M, 2)
                hind = {"opt_upper": bound, "solver_status": "bound_3.5M"}
            out.rows.append(_row(cfg, trial, None, pol, inst, rep, live, hind))
            out.timings.append({"trial": trial, "n": inst.n, "policy": pol.label,
                                "sim_seconds": sim_s, "solver_seconds": solve_s})
        return out

    inst = _instance_for(cfg, trial, n)
    hind, solve_s = ({}, 0.0)
    if cfg.compute_hindsight:
        hind, solve_s = _hindsight(cfg, inst)
    for pol in cfg.policies:
        rep, live, sim_s = _simulate(cfg, inst, pol)
        out.rows.append(_row(cfg, trial, n, pol, inst, rep, live, hind))
        out.timings.append({"trial": trial, "n": inst.n, "policy": pol.label,
                            "sim_seconds": sim_s, "solver_seconds": solve_s})
        if rep is None:
            continue
        if cfg.output.memory_timeline:
            out.timelines.extend((trial, inst.n, pol.label, r, occ)
                                 for r, occ in rep.metrics.memory_timeline)
        if cfg.output.throughput:
            ts = throughput_series(rep, cfg.output.throughput_window)
            arr = dict(ts.arrivals)
            keys = sorted(set(arr) | {w for w, _ in ts.processed})
            proc = dict(ts.processed)
            out.throughput.extend((trial, inst.n, pol.label, w, proc.get(w, 0), arr.get(w, 0))
                                  for w in keys)
    return out


def _run_cell_star(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, jobs: int | None = None) -> list[CellResult]:
    cells = cfg.cells()
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(cfg, c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_star, [(cfg, c) for c in cells]))


# --------------------------------------------------------------------------
# artifacts


def _csv_text(columns: Sequence[str], rows: Sequence[dict | tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        if isinstance(r, dict):
            w.writerow([r[c] for c in columns])
        else:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in r])
    return buf.getvalue()


def _stats(values: list[float]) -> dict:
    if not values:
        return {"count": 0}
    return {
        "count": len(values),
        "mean": statistics.fmean(values),
        "std": statistics.pstdev(values) if len(values) > 1 else 0.0,
        "min": min(values),
        "max": max(values),
    }


def summarize_rows(rows: Sequence[dict], policy_order: Sequence[str], name: str = "") -> dict:
    """Per-policy statistics, computed from the CSV text values."""
    out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "name": name, "policies": {}}
    for label in policy_order:
        mine = [r for r in rows if r["policy"] == label]
        entry: dict[str, Any] = {"rows": len(mine),
                                 "livelocks": sum(r["livelock"] == "1" for r in mine)}
        for col in ("tel", "avg_latency", "avg_latency_seconds", "evictions", "ratio",
                    "ratio_upper"):
            vals = [float(r[col]) for r in mine if r[col] != ""]
            if vals:
                entry[col] = _stats(vals)
        entry["optimal_trials"] = sum(r["optimal"] == "1" and r["ratio"] == "1" for r in mine)
        entry["certified_trials"] = sum(r["optimal"] == "1" for r in mine)
        ns = sorted({int(r["n"]) for r in mine})
        if len(ns) > 1 and all(r["avg_latency"] != "" for r in mine):
            xs, ys = [], []
            for n in ns:
                vals = [float(r["avg_latency"]) for r in mine if int(r["n"]) == n]
                xs.append(float(n))
                ys.append(statistics.fmean(vals))
            entry["latency_slope"] = _slope(xs, ys)
            entry["latency_by_n"] = {str(int(x)): y for x, y in zip(xs, ys)}
        out["policies"][label] = entry
    return out


def _slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    mx, my = statistics.fmean(xs), statistics.fmean(ys)
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / sxx


def write_artifacts(cfg: ExperimentConfig, results: Sequence[CellResult], out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = {p.label: i for i, p in enumerate(cfg.policies)}
    rows = [r for c in results for r in c.rows]
    rows.sort(key=lambda r: (int(r["trial"]), int(r["n"]), order[r["policy"]]))
    (out / "results.csv").write_text(_csv_text(RESULT_COLUMNS, rows), encoding="utf-8")
    timings = [r for c in results for r in c.timings]
    timings.sort(key=lambda r: (r["trial"], r["n"], order[r["policy"]]))
    (out / "timings.csv").write_text(_csv_text(TIMING_COLUMNS, [
        {k: _num(v) if k != "policy" else v for k, v in r.items()} for r in timings]),
        encoding="utf-8")
    if cfg.output.memory_timeline:
        tl = sorted((r for c in results for r in c.timelines),
                    key=lambda r: (r[0], r[1], order[r[2]], r[3]))
        (out / "memory_timeline.csv").write_text(_csv_text(TIMELINE_COLUMNS, tl), encoding="utf-8")
    if cfg.output.throughput:
        tp = sorted((r for c in results for r in c.throughput),
                    key=lambda r: (r[0], r[1], order[r[2]], r[3]))
        (out / "throughput.csv").write_text(_csv_text(THROUGHPUT_COLUMNS, tp), encoding="utf-8")
    parsed = list(csv.DictReader(io.StringIO((out / "results.csv").read_text(encoding="utf-8"))))
    summary = summarize_rows(parsed, [p.label for p in cfg.policies], cfg.name)
    summary["config"] = {"name": cfg.name, "model": cfg.model, "trials": cfg.trials,
                         "seed": cfg.seed, "compute_hindsight": cfg.compute_hindsight}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    if cfg.output.figures:
        from .plotting import render_figures

        render_figures(cfg, out)
    return summary
