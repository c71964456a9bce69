"""Hindsight benchmark: exact and relaxed minimum total latency.

The time-indexed model uses one binary ``x[i, p]`` per request ``i`` and
start round ``p`` in a domain ``[a_i, h_i]``.  Each request starts exactly once,
and the memory row for round ``t`` sums ``(s_i + t - p) * x[i, p]`` over the
starts active at ``t``.  The objective is ``sum (p + o_i - a_i) x[i, p]``.

By default ``h_i`` comes from :func:`certified_domains`, so the model's
optimum is the true optimum.  An explicit horizon ``H`` gives
``h_i = H - o_i`` and the optimum of the truncated problem instead.

Backends for :func:`solve_ip`:

``cpsat``
    OR-Tools CP-SAT on the model above, hinted with the better of the
    MC-SF and MC-Benchmark schedules.  ``time_budget`` is CP-SAT
    deterministic time, so results do not depend on machine load.
``bnb``
    Depth-first branch and bound over start rounds in (arrival, id)
    order.  Exact and returns the lexicographically smallest optimal start
    vector, but only practical for small instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import Instance, KvschedError, Request, Schedule, tel, validate_schedule, volume


class HorizonError(KvschedError, ValueError):
    pass


class CapExceededError(KvschedError, ValueError):
    pass


class VolumeBoundError(KvschedError, ValueError):
    pass


@dataclass(frozen=True)
class IpModel:
    horizon: int
    memory_limit: int
    domains: tuple[tuple[int, int], ...]  # inclusive start range per request
    requests: tuple[Request, ...]

    @classmethod
    def build(cls, instance: Instance, horizon: int | None = None,
              domains: Sequence[tuple[int, int]] | None = None) -> "IpModel":
        """Model over ``[a_i, horizon - o_i]`` or over explicit start domains."""
        if (horizon is None) == (domains is None):
            raise ValueError("pass exactly one of horizon or domains")
        if domains is None:
            domains = [(r.arrival, horizon - r.output_len) for r in instance.requests]
        doms = []
        for r, (lo, hi) in zip(instance.requests, domains):
            lo = max(lo, r.arrival)
            if hi < lo or r.prompt_size + r.output_len > instance.memory_limit:
                raise HorizonError(f"horizon too small: request {r.id} has no feasible start")
            doms.append((lo, hi))
        end = max((hi + r.output_len for r, (_lo, hi) in zip(instance.requests, doms)), default=0)
        return cls(end, instance.memory_limit, tuple(doms), instance.requests)

    def cost(self, i: int, p: int) -> int:
        r = self.requests[i]
        return p + r.output_len - r.arrival

    def variables(self):
        for i, (lo, hi) in enumerate(self.domains):
            for p in range(lo, hi + 1):
                yield i, p

    def memory_rows(self) -> dict[int, list[tuple[int, int, int]]]:
        """round -> [(i, p, coefficient)]"""
        rows: dict[int, list[tuple[int, int, int]]] = {}
        for i, p in self.variables():
            r = self.requests[i]
            for t in range(p + 1, p + r.output_len + 1):
                rows.setdefault(t, []).append((i, p, r.prompt_size + t - p))
        return rows


@dataclass(frozen=True)
class BoundReport:
    lower: Fraction
    upper: int
    optimal: bool
    nodes_explored: int = 0
    wall_limit_hit: bool = False
    backend: str = ""
    horizon: int = 0
    clipped: bool = False  # search domains were cut below the certified ones

    @property
    def lower_int(self) -> int:
        return math.ceil(self.lower)

    def to_dict(self) -> dict:
        return {
            "lower": self.lower_int,
            "upper": self.upper,
            "optimal": self.optimal,
            "nodes_explored": self.nodes_explored,
            "wall_limit_hit": self.wall_limit_hit,
            "backend": self.backend,
            "horizon": self.horizon,
            "clipped": self.clipped,
        }


def _truthful(instance: Instance) -> Instance:
    """Same instance with predictions replaced by true lengths (hindsight knows o)."""
    return Instance(
        instance.memory_limit,
        tuple(Request(r.id, r.arrival, r.prompt_size, r.output_len, r.output_len)
              for r in instance.requests),
    )


def heuristic_schedules(instance: Instance) -> list[Schedule]:
    from .engine import run
    from .schedulers import PolicyConfig

    inst = _truthful(instance)
    out = []
    for kind in ("mcsf", "mc_benchmark"):
        out.append(run(inst, PolicyConfig(kind), record_events=False).schedule)
    return out


def default_horizon(instance: Instance, heuristics: Sequence[Schedule] | None = None) -> int:
    """Latest completion among the heuristic schedules.

    Not a safe horizon in general: an optimum may idle a long request and
    finish later (see :func:`certified_domains`).
    """
    if heuristics is None:
        heuristics = heuristic_schedules(instance)
    return max((s.makespan(instance) for s in heuristics), default=0)


def best_heuristic(instance: Instance) -> Schedule:
    heur = heuristic_schedules(instance)
    return min(heur, key=lambda s: (tel(s, instance), s.vector(instance)))


def certified_domains(instance: Instance, upper: int) -> list[tuple[int, int]]:
    """Start domains that contain every schedule with total latency <= ``upper``.

    In such a schedule the other requests already account for at least
    ``LB(I minus i)`` of the latency, so request ``i`` waits at most
    ``upper - LB(I minus i) - o_i`` rounds after its arrival.  ``LB`` is the
    larger of the summed output lengths and the release-tolerant volume bound.
    """
    reqs = instance.requests
    total_o = sum(r.output_len for r in reqs)
    doms = []
    for r in reqs:
        others = [q for q in reqs if q.id != r.id]
        lb = max(Fraction(total_o - r.output_len),
                 _released_volume(instance.memory_limit, others))
        wait = math.floor(upper - lb) - r.output_len
        doms.append((r.arrival, r.arrival + max(wait, 0)))
    return doms


def _check_servable(instance: Instance) -> None:
    for r in instance.requests:
        if r.prompt_size + r.output_len > instance.memory_limit:
            raise HorizonError(
                f"horizon too small: request {r.id} needs {r.prompt_size + r.output_len} tokens "
                f"at its last round but memory_limit is {instance.memory_limit}"
            )


def solve_ip(instance: Instance, time_budget: float = 10.0, *, horizon: int | None = None,
             backend: str = "cpsat", workers: int = 8,
             max_terms: int = 1_500_000) -> tuple[Schedule, BoundReport]:
    """Minimum total latency schedule plus certified bounds.

    Without ``horizon`` the search covers the certified domains, so a proven
    optimum is the true optimum.  When those domains would give a model with
    more than roughly ``max_terms`` memory-row terms, they are clipped to the
    latest heuristic completion; the search then only improves the upper
    bound, and the lower bound is the global one (summed output lengths and
    the volume bound).  With an explicit ``horizon`` the problem itself is
    truncated to ``[a_i, horizon - o_i]`` and the bounds refer to it.
    """
    if time_budget <= 0:
        raise ValueError("time_budget must be positive")
    if instance.n == 0:
        return Schedule({}), BoundReport(Fraction(0), 0, True, backend=backend)
    _check_servable(instance)
    heur = heuristic_schedules(instance)
    clipped = False
    if horizon is None:
        best = min(heur, key=lambda s: (tel(s, instance), s.vector(instance)))
        doms = certified_domains(instance, tel(best, instance))
        terms = sum((hi - lo + 1) * r.output_len for r, (lo, hi) in zip(instance.requests, doms))
        if terms > max_terms:
            cap = default_horizon(instance, heur)
            doms = [(lo, min(hi, cap - r.output_len)) for r, (lo, hi) in zip(instance.requests, doms)]
            clipped = True
        model = IpModel.build(instance, domains=doms)
    else:
        model = IpModel.build(instance, horizon)
    H = model.horizon
    inside = [s for s in heur if all(lo <= s.start[r.id] <= hi for r, (lo, hi)
                                     in zip(instance.requests, model.domains))]
    incumbent = min(inside, key=lambda s: (tel(s, instance), s.vector(instance)), default=None)

    trivial = max(Fraction(sum(r.output_len for r in instance.requests)),
                  released_volume_bound(instance))

    if backend == "cpsat":
        sched, lower, optimal, nodes = _solve_cpsat(model, incumbent, time_budget, workers)
    elif backend == "bnb":
        sched, lower, optimal, nodes = _solve_bnb(model, incumbent, time_budget)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if sched is None:
        raise HorizonError("horizon too small: no feasible schedule found within the horizon")
    upper = tel(sched, instance)
    if clipped:
        # the search bound only covers the clipped domains
        lower, optimal = trivial, False
    lower = max(lower, trivial)
    if not optimal and not clipped and math.ceil(lower) < upper:
        # the LP relaxation is usually far tighter than what the search proved
        lower = max(lower, _model_lp(model))
    if optimal:
        lower = Fraction(upper)
    elif math.ceil(lower) >= upper:
        optimal, lower = True, Fraction(upper)
    return sched, BoundReport(lower, upper, optimal, nodes, not optimal, backend, H, clipped)


def _identical_groups(model: IpModel) -> list[list[int]]:
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, r in enumerate(model.requests):
        groups.setdefault((r.arrival, r.prompt_size, r.output_len), []).append(i)
    return [g for g in groups.values() if len(g) > 1]


def _solve_cpsat(model: IpModel, incumbent: Schedule | None, budget: float, workers: int):
    from ortools.sat.python import cp_model

    m = cp_model.CpModel()
    x: dict[tuple[int, int], object] = {}
    per_req: list[list[tuple[int, object]]] = [[] for _ in model.requests]
    for i, p in model.variables():
        v = m.NewBoolVar(f"x_{i}_{p}")
        x[i, p] = v
        per_req[i].append((p, v))
    for i, lits in enumerate(per_req):
        m.AddExactlyOne([v for _, v in lits])
    for t, items in sorted(model.memory_rows().items()):
        total = sum(c for _, _, c in items)
        if total > model.memory_limit:
            m.Add(cp_model.LinearExpr.WeightedSum([x[i, p] for i, p, _ in items],
                                                  [c for _, _, c in items]) <= model.memory_limit)
    starts = [cp_model.LinearExpr.WeightedSum([v for _, v in lits], [p for p, _ in lits])
              for lits in per_req]
    for g in _identical_groups(model):
        for i, j in zip(g, g[1:]):
            m.Add(starts[i] <= starts[j])
    keys = list(x)
    m.Minimize(cp_model.LinearExpr.WeightedSum([x[k] for k in keys],
                                               [model.cost(*k) for k in keys]))
    if incumbent is not None:
        for (i, p), v in x.items():
            m.AddHint(v, int(incumbent.start[model.requests[i].id] == p))

    solver = cp_model.CpSolver()
    solver.parameters.max_deterministic_time = float(budget)
    solver.parameters.num_workers = max(1, int(workers))
    solver.parameters.interleave_search = True
    solver.parameters.random_seed = 0
    status = solver.Solve(m)
    sched = incumbent
    lower = Fraction(0)
    optimal = False
    if status in (cp_model.OPTIMAL, cp_model.FEASIBLE):
        found = {model.requests[i].id: p for (i, p), v in x.items() if solver.BooleanValue(v)}
        cand = Schedule(dict(sorted(found.items())))
        inst = Instance(model.memory_limit, model.requests)
        if validate_schedule(cand, inst) is None and (
                sched is None or tel(cand, inst) <= tel(sched, inst)):
            sched = cand
        lower = Fraction(math.ceil(solver.BestObjectiveBound() - 1e-6))
        optimal = status == cp_model.OPTIMAL
    elif status == cp_model.INFEASIBLE:
        sched = None
    return sched, lower, optimal, int(solver.NumBranches())


def _solve_bnb(model: IpModel, incumbent: Schedule | None, budget: float,
               nodes_per_unit: int = 200_000):
    """Exact DFS; incumbents must strictly improve, so the first optimum found
    in lexicographic order is the one returned."""
    reqs = model.requests
    n = len(reqs)
    H = model.horizon
    M = model.memory_limit
    usage = np.zeros(H + 2, dtype=np.int64)
    rest_lb = [0] * (n + 1)
    for k in range(n - 1, -1, -1):
        rest_lb[k] = rest_lb[k + 1] + reqs[k].output_len
    inst = Instance(M, reqs)
    best_val = tel(incumbent, inst) + 1 if incumbent is not None else math.inf
    best: list[int] | None = None
    node_limit = max(1, int(budget * nodes_per_unit))
    nodes = 0
    starts = [0] * n
    ramps = [np.arange(1, r.output_len + 1, dtype=np.int64) + r.prompt_size for r in reqs]

    def dfs(k: int, cost: int) -> bool:
        nonlocal best_val, best, nodes
        if k == n:
            if cost < best_val:
                best_val, best = cost, starts.copy()
            return True
        r = reqs[k]
        lo, hi = model.domains[k]
        for p in range(lo, hi + 1):
            lat = p + r.output_len - r.arrival
            if cost + lat + rest_lb[k + 1] >= best_val:
                break
            nodes += 1
            if nodes > node_limit:
                return False
            seg = usage[p + 1:p + r.output_len + 1]
            if int((seg + ramps[k]).max()) > M:
                continue
            seg += ramps[k]
            starts[k] = p
            ok = dfs(k + 1, cost + lat)
            seg -= ramps[k]
            if not ok:
                return False
        return True

    complete = dfs(0, 0)
    if best is not None:
        sched = Schedule({reqs[i].id: best[i] for i in range(n)})
    else:
        sched = incumbent
    if complete:
        return sched, Fraction(tel(sched, inst)) if sched else Fraction(0), sched is not None, nodes
    return sched, Fraction(0), False, nodes


def brute_force_opt(instance: Instance, horizon: int | None = None, *,
                    max_n: int = 6, max_horizon: int = 12) -> Schedule:
    """Enumerate every start tuple in ``[a_i, H - o_i]`` (lexicographic order).

    Without an explicit horizon the certified domains of the best heuristic
    schedule are enumerated instead, which contain every optimum.

    Partial tuples that already violate memory are skipped together with
    all their extensions, which can only add usage.
    """
    n = instance.n
    if n == 0:
        return Schedule({})
    if horizon is None:
        _check_servable(instance)
        bf_doms = certified_domains(instance, tel(best_heuristic(instance), instance))
        H = max(hi + r.output_len for r, (_lo, hi) in zip(instance.requests, bf_doms))
    else:
        H = horizon
    if n > max_n or H > max_horizon:
        raise CapExceededError(f"brute force limited to n <= {max_n} and horizon <= {max_horizon}; "
                               f"got n={n}, horizon={H}")
    reqs = instance.requests
    M = instance.memory_limit
    if horizon is None:
        doms = [range(lo, hi + 1) for lo, hi in bf_doms]
    else:
        doms = [range(r.arrival, H - r.output_len + 1) for r in reqs]
    best: tuple[int, tuple[int, ...]] | None = None
    usage = [0] * (H + 2)
    chosen: list[int] = []

    def rec(k: int, cost: int) -> None:
        nonlocal best
        if k == n:
            if best is None or cost < best[0]:
                best = (cost, tuple(chosen))
            return
        r = reqs[k]
        for p in doms[k]:
            span = range(p + 1, p + r.output_len + 1)
            if any(usage[t] + r.prompt_size + t - p > M for t in span):
                continue
            for t in span:
                usage[t] += r.prompt_size + t - p
            chosen.append(p)
            rec(k + 1, cost + p + r.output_len - r.arrival)
            chosen.pop()
            for t in span:
                usage[t] -= r.prompt_size + t - p

    rec(0, 0)
    if best is None:
        raise HorizonError("horizon too small: no feasible schedule within the cap")
    sched = Schedule({r.id: p for r, p in zip(reqs, best[1])})
    assert validate_schedule(sched, instance) is None
    return sched


def lp_relaxation(instance: Instance, horizon: int | None = None) -> Fraction:
    """Continuous relaxation (``0 <= x <= 1``) of the time-indexed model.

    The LP is solved in floating point by HiGHS, but the returned number is
    exact: it is the Lagrangian value of rationalised dual prices, which is a
    valid lower bound for any prices and equals the LP optimum whenever the
    prices are recovered exactly.
    """
    if instance.n == 0:
        return Fraction(0)
    _check_servable(instance)
    if horizon is None:
        ub = tel(best_heuristic(instance), instance)
        model = IpModel.build(instance, domains=certified_domains(instance, ub))
    else:
        model = IpModel.build(instance, horizon)
    return _model_lp(model)


def _model_lp(model: IpModel) -> Fraction:
    from scipy.optimize import linprog
    from scipy.sparse import coo_matrix

    keys = list(model.variables())
    idx = {k: j for j, k in enumerate(keys)}
    rows = [items for _t, items in sorted(model.memory_rows().items())
            if sum(c for *_r, c in items) > model.memory_limit]
    nv = len(keys)
    n = len(model.requests)
    cost = [model.cost(*k) for k in keys]
    owner = [i for i, _p in keys]
    A_eq = coo_matrix((np.ones(nv), (owner, range(nv))), shape=(n, nv))
    ur, uc, uv = [], [], []
    for r_i, items in enumerate(rows):
        for i, p, coef in items:
            ur.append(r_i)
            uc.append(idx[(i, p)])
            uv.append(coef)
    A_ub = coo_matrix((uv, (ur, uc)), shape=(len(rows), nv)) if rows else None
    res = linprog(np.array(cost, dtype=float), A_ub=A_ub,
                  b_ub=np.full(len(rows), model.memory_limit) if rows else None,
                  A_eq=A_eq, b_eq=np.ones(n), bounds=(0, 1), method="highs")
    if res.status != 0:  # pragma: no cover
        raise KvschedError(f"LP solve failed: {res.message}")
    u_f = res.eqlin.marginals
    w_f = res.ineqlin.marginals if rows else np.zeros(0)
    best = None
    for snap in (lambda v: Fraction(float(v)).limit_denominator(1000),
                 lambda v: Fraction(round(float(v) * 2**30), 2**30)):
        u = [snap(v) for v in u_f]
        w = [min(snap(v), Fraction(0)) for v in w_f]
        val = _lagrangian(model, keys, idx, rows, cost, owner, u, w)
        best = val if best is None else max(best, val)
    return best


def _lagrangian(model, keys, idx, rows, cost, owner, u, w) -> Fraction:
    """``sum u + M sum w + sum_j min(0, reduced cost_j)`` for prices ``w <= 0``.

    Valid for every ``u`` and every ``w <= 0`` because each ``x_j`` lies in
    ``[0, 1]``; computed over a common denominator in integers.
    """
    D = 1
    for v in (*u, *w):
        D = math.lcm(D, v.denominator)
    U = [int(v * D) for v in u]
    W = [int(v * D) for v in w]
    red = [c * D - U[i] for c, i in zip(cost, owner)]
    for r_i, items in enumerate(rows):
        if W[r_i]:
            for i, p, coef in items:
                red[idx[(i, p)]] -= coef * W[r_i]
    total = sum(U) + model.memory_limit * sum(W) + sum(min(0, r) for r in red)
    return Fraction(total, D)


@dataclass(frozen=True)
class VolumeBound:
    value: Fraction
    t_star: dict[int, int] = field(default_factory=dict)  # output length -> first round used
    assignment: tuple[tuple[int, int, Fraction], ...] = ()  # (request id, round, fraction)


def volume_lp_lower_bound(instance: Instance) -> VolumeBound:
    """Water-filling solution of the cumulative-volume relaxation.

    Requests are taken in ascending memory volume ``s*o + o(o+1)/2`` and
    poured into rounds ``1, 2, ...`` with capacity ``M`` per round; a request
    whose volume spans several rounds is split fractionally and each part
    costs its round index.
    """
    if any(r.arrival != 0 for r in instance.requests):
        raise VolumeBoundError("volume bound requires simultaneous release")
    return _water_fill(instance.memory_limit, instance.requests)


def _water_fill(M: int, requests: Sequence[Request]) -> VolumeBound:
    order = sorted(requests, key=lambda r: (volume(r.prompt_size, r.output_len),
                                            r.output_len, r.id))
    t = 1
    room = Fraction(M)
    total = Fraction(0)
    t_star: dict[int, int] = {}
    parts = []
    for r in order:
        left = Fraction(1)
        vol = volume(r.prompt_size, r.output_len)
        t_star.setdefault(r.output_len, t)
        while left > 0:
            if room == 0:
                t += 1
                room = Fraction(M)
            take = min(left, room / vol)
            parts.append((r.id, t, take))
            total += take * t
            left -= take
            room -= take * vol
    return VolumeBound(total, dict(sorted(t_star.items())), tuple(parts))


def released_volume_bound(instance: Instance) -> Fraction:
    """Volume bound that tolerates staggered arrivals.

    Every schedule of ``instance`` is also a schedule of the same requests
    released at round 0, whose total latency is the sum of completion
    rounds.  Hence ``TEL >= volume_lp(released at 0) - sum(a_i)``.
    """
    return _released_volume(instance.memory_limit, instance.requests)


def _released_volume(M: int, requests: Sequence[Request]) -> Fraction:
    return _water_fill(M, requests).value - sum(r.arrival for r in requests)


def volume_lp_generic(instance: Instance, horizon: int | None = None) -> float:
    """The same cumulative-volume program solved as a plain LP (cross-check)."""
    from scipy.optimize import linprog

    reqs = instance.requests
    if not reqs:
        return 0.0
    vols = [volume(r.prompt_size, r.output_len) for r in reqs]
    T = horizon or (sum(vols) // instance.memory_limit + 2)
    n = len(reqs)
    nv = n * T
    c = np.array([t + 1 for _i in range(n) for t in range(T)], dtype=float)
    A_eq = np.zeros((n, nv))
    for i in range(n):
        A_eq[i, i * T:(i + 1) * T] = 1
    A_ub = np.zeros((T, nv))
    for tt in range(T):
        for i in range(n):
            A_ub[tt, i * T:i * T + tt + 1] = vols[i]
    b_ub = np.array([(tt + 1) * instance.memory_limit for tt in range(T)], dtype=float)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(n), bounds=(0, None),
                  method="highs")
    return float(res.fun)


def write_lp(instance: Instance, path, horizon: int | None = None) -> None:
    """Write the time-indexed model in CPLEX LP format."""
    if horizon is None:
        ub = tel(best_heuristic(instance), instance)
        model = IpModel.build(instance, domains=certified_domains(instance, ub))
    else:
        model = IpModel.build(instance, horizon)
    name = lambda i, p: f"x_{i}_{p}"  # noqa: E731
    lines = ["\\ minimum total latency, time-indexed", "Minimize", " obj:"]
    lines += [f"  + {model.cost(i, p)} {name(i, p)}" for i, p in model.variables()]
    lines.append("Subject To")
    for i, (lo, hi) in enumerate(model.domains):
        terms = " + ".join(name(i, p) for p in range(lo, hi + 1))
        lines.append(f" once_{i}: {terms} = 1")
    for t, items in sorted(model.memory_rows().items()):
        terms = " + ".join(f"{c} {name(i, p)}" for i, p, c in items)
        lines.append(f" mem_{t}: {terms} <= {model.memory_limit}")
    lines.append("Binary")
    lines += [f" {name(i, p)}" for i, p in model.variables()]
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def enumerate_starts(instance: Instance, horizon: int):
    """All start tuples in lexicographic order (tiny instances only)."""
    doms = [range(r.arrival, horizon - r.output_len + 1) for r in instance.requests]
    return itertools.product(*doms)
