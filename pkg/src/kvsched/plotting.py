"""PNG figures rendered from the CSV artifacts of a run."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable between identical runs
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def ratio_histogram(rows: list[dict], path: Path) -> bool:
    by_pol = defaultdict(list)
    for r in rows:
        if r["ratio"]:
            by_pol[r["policy"]].append(float(r["ratio"]))
    if not by_pol:
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, vals in by_pol.items():
        ax.hist(vals, bins=20, alpha=0.6, label=label)
    ax.set_xlabel("TEL / best hindsight schedule")
    ax.set_ylabel("trials")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def latency_vs_n(rows: list[dict], path: Path) -> bool:
    series = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["avg_latency"]:
            series[r["policy"]][int(r["n"])].append(float(r["avg_latency"]))
    if not series or all(len(v) < 2 for v in series.values()):
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, pts in series.items():
        ns = sorted(pts)
        ax.plot(ns, [sum(pts[n]) / len(pts[n]) for n in ns], marker="o", label=label)
    ax.set_xlabel("requests")
    ax.set_ylabel("average latency (rounds)")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def ratio_vs_memory(rows: list[dict], path: Path) -> bool:
    pts = defaultdict(dict)
    for r in rows:
        if r["ratio"]:
            pts[r["policy"]][int(r["M"])] = float(r["ratio"])
    if not pts:
        return False
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, d in pts.items():
        ms = sorted(d)
        ax.plot(ms, [d[m] for m in ms], marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("memory limit M")
    ax.set_ylabel("TEL / hindsight bound")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def memory_timeline(rows: list[dict], path: Path, limit: int | None = None) -> bool:
    if not rows:
        return False
    first_trial = rows[0]["trial"]
    series = defaultdict(list)
    for r in rows:
        if r["trial"] == first_trial:
            series[r["policy"]].append((int(r["round"]), int(r["occupancy"])))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.8, label=label)
    if limit:
        ax.axhline(limit, color="k", ls="--", lw=0.8)
    ax.set_xlabel("round")
    ax.set_ylabel("KV tokens held")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def throughput(rows: list[dict], path: Path) -> bool:
    if not rows:
        return False
    first_trial = rows[0]["trial"]
    series = defaultdict(list)
    arrivals = {}
    for r in rows:
        if r["trial"] != first_trial:
            continue
        w = float(r["window_start"])
        series[r["policy"]].append((w, int(r["tokens"])))
        arrivals[w] = int(r["arrival_tokens"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.8, label=label)
    ws = sorted(arrivals)
    ax.plot(ws, [arrivals[w] for w in ws], color="k", lw=0.6, ls=":", label="arriving tokens")
    ax.set_xlabel("seconds")
    ax.set_ylabel("tokens per window")
    ax.legend(fontsize=7)
    _save(fig, path)
    return True


def render_figures(cfg, out_dir) -> list[str]:
    out = Path(out_dir)
    rows = _read(out / "results.csv")
    made = []
    if cfg.model == "adversarial":
        if ratio_vs_memory(rows, out / "ratio_vs_M.png"):
            made.append("ratio_vs_M.png")
    elif cfg.compute_hindsight:
        if ratio_histogram(rows, out / "ratio_hist.png"):
            made.append("ratio_hist.png")
    if cfg.model == "trace" and latency_vs_n(rows, out / "latency_vs_n.png"):
        made.append("latency_vs_n.png")
    limit = None
    if rows:
        limit = int(rows[0]["M"])
    if memory_timeline(_read(out / "memory_timeline.csv"), out / "memory_timeline.png", limit):
        made.append("memory_timeline.png")
    if throughput(_read(out / "throughput.csv"), out / "throughput.png"):
        made.append("throughput.png")
    return made
