"""Command line entry point: ``kvsched {run,gen,validate,solve}``.

Exit codes: 0 success, 1 a checked property failed (e.g. an invalid
schedule), 2 bad input (config, flags, files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .core import KvschedError, Schedule, tel, validate_schedule
from .experiment import ConfigError, load_config, run_experiment, write_artifacts
from .hindsight import solve_ip, write_lp
from .workloads import (
    GenSpec,
    TraceSpec,
    apply_prediction_noise,
    gen_adversarial,
    generate,
    load_instance,
    save_instance,
)

log = logging.getLogger("kvsched")


def _setup_logging() -> None:
    level = os.environ.get("KVSCHED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def bundled_config(name: str) -> Path:
    """Path of a config shipped inside the package (e.g. ``am1_paper.toml``)."""
    return Path(str(resources.files("kvsched") / "configs" / name))


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    cand = bundled_config(arg if arg.endswith(".toml") else arg + ".toml")
    if cand.exists():
        return cand
    raise ConfigError(f"{arg}: no such config file or bundled config")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(_resolve_config(args.config))
        cfg = cfg.with_overrides(seed=args.seed, trials=args.trials, jobs=args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or f"runs/{cfg.name}")
    results = run_experiment(cfg, args.jobs)
    summary = write_artifacts(cfg, results, out)
    for label, entry in summary["policies"].items():
        parts = [label]
        if "avg_latency" in entry:
            parts.append(f"avg_latency={entry['avg_latency']['mean']:.4g}")
        if "ratio" in entry:
            parts.append(f"ratio_mean={entry['ratio']['mean']:.4f} max={entry['ratio']['max']:.4f}")
        if "latency_slope" in entry:
            parts.append(f"slope={entry['latency_slope']:.4g}")
        if entry.get("livelocks"):
            parts.append(f"livelocks={entry['livelocks']}")
        print("  ".join(parts))
    print(f"wrote {out}/results.csv")
    return 0


def _pair(vals):
    return tuple(vals) if vals else None


def cmd_gen(args: argparse.Namespace) -> int:
    try:
        if args.model == "adversarial":
            inst = gen_adversarial(args.M, args.b)
        elif args.model == "trace":
            inst = TraceSpec(n=args.n, lambda_per_second=args.lambda_per_second,
                             rounds_per_second=args.rounds_per_second, path=args.trace,
                             seed=args.seed).build()
        else:
            kw = {k: v for k, v in {
                "M_range": _pair(args.M_range), "s_range": _pair(args.s_range),
                "n_range": _pair(args.n_range), "T_range": _pair(args.T_range),
                "lambda_range": _pair(args.lambda_range)}.items() if v is not None}
            if args.o_range:
                kw["o_range"] = tuple(args.o_range)
            inst = generate(GenSpec(model=args.model, seed=args.seed, **kw))
        if args.epsilon:
            inst = apply_prediction_noise(inst, args.epsilon, args.noise_mode, args.seed + 1)
    except (KvschedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        save_instance(inst, args.out)
    else:
        print(json.dumps(inst.to_dict(), indent=1))
    return 0


def _load_schedule(path: str) -> Schedule:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "start" not in data and "schedule" in data:
        data = {"start": data["schedule"]}
    return Schedule.from_dict(data)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        inst = load_instance(args.instance)
        sched = _load_schedule(args.schedule)
    except (KvschedError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    v = validate_schedule(sched, inst)
    if v is None:
        print(f"ok  tel={tel(sched, inst)}")
        return 0
    print(f"violation: {v}")
    return 1


def cmd_solve(args: argparse.Namespace) -> int:
    try:
        inst = load_instance(args.instance)
        if args.lp:
            write_lp(inst, args.lp, args.horizon)
        sched, bound = solve_ip(inst, args.time_budget, horizon=args.horizon, backend=args.backend)
    except (KvschedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    payload = {"schema_version": 1, "bound": bound.to_dict(), "tel": bound.upper,
               "schedule": sched.to_dict()["start"]}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvsched", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True, help="TOML file or bundled config name")
    r.add_argument("--seed", type=int, help="override the base seed")
    r.add_argument("--trials", type=int, help="override the trial count")
    r.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    r.add_argument("--out", help="output directory (default runs/<name>)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="generate an instance as JSON")
    g.add_argument("--model", required=True,
                   choices=["all_at_once", "poisson", "adversarial", "trace"])
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--M-range", type=int, nargs=2, dest="M_range")
    g.add_argument("--s-range", type=int, nargs=2, dest="s_range")
    g.add_argument("--o-range", type=int, nargs=2, dest="o_range")
    g.add_argument("--n-range", type=int, nargs=2, dest="n_range")
    g.add_argument("--T-range", type=int, nargs=2, dest="T_range")
    g.add_argument("--lambda-range", type=float, nargs=2, dest="lambda_range")
    g.add_argument("--M", type=int, default=16, help="adversarial memory limit")
    g.add_argument("--b", type=int, default=0, help="adversarial start of the long request")
    g.add_argument("--n", type=int, default=1000, help="trace sample size")
    g.add_argument("--trace", help="JSONL trace (default: synthetic corpus)")
    g.add_argument("--lambda-per-second", type=float, default=50.0)
    g.add_argument("--rounds-per-second", type=float, default=5.0)
    g.add_argument("--epsilon", type=float, default=0.0)
    g.add_argument("--noise-mode", default="two_sided", choices=["two_sided", "overestimate"])
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("validate", help="check a schedule against an instance")
    v.add_argument("--schedule", required=True)
    v.add_argument("--instance", required=True)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="hindsight-optimal schedule for an instance file")
    s.add_argument("--instance", required=True)
    s.add_argument("--time-budget", type=float, default=10.0)
    s.add_argument("--backend", default="cpsat", choices=["cpsat", "bnb"])
    s.add_argument("--horizon", type=int)
    s.add_argument("--lp", help="also export the model in LP format to this path")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
