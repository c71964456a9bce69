import csv
import json
import statistics
import subprocess
import sys
from pathlib import Path

import pytest

from kvsched.cli import bundled_config, main
from kvsched.core import Instance, Request, Schedule
from kvsched.experiment import (
    RESULT_COLUMNS,
    ConfigError,
    parse_config,
    run_cell,
    run_experiment,
    write_artifacts,
)
from kvsched.workloads import save_instance

SMALL = """\
name = "small"
trials = 3
seed = 11
compute_hindsight = true

[generator]
model = "all_at_once"
M_range = [8, 12]
s_range = [1, 3]
n_range = [3, 5]

[hindsight]
time_budget = 2.0

[[policies]]
kind = "mcsf"

[[policies]]
kind = "alpha_beta_clearing"
alpha = 0.1
beta = 0.5
rng_seed = 4

[[policies]]
kind = "fcfs"
"""

TRACE = """\
name = "tiny_trace"
trials = 1
seed = 2

[generator]
model = "trace"
n_values = [40, 80]
lambda_per_second = 50.0
rounds_per_second = 5.0

[duration]
kind = "affine"
c0 = 0.05
c1 = 0.0001

[output]
memory_timeline = true
throughput = true
figures = false

[[policies]]
kind = "mcsf"

[[policies]]
kind = "alpha_protection"
alpha = 0.2
"""


def _read_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_unknown_key_is_rejected_with_line():
    text = SMALL.replace("M_range = [8, 12]", "M_range = [8, 12]\nM_rnage = [1, 2]")
    with pytest.raises(ConfigError, match=r"cfg.toml:9: .*M_rnage"):
        parse_config(text, "cfg.toml")


def test_bad_values_are_rejected():
    with pytest.raises(ConfigError, match="trials"):
        parse_config(SMALL.replace("trials = 3", "trials = 0"))
    with pytest.raises(ConfigError, match="refuses"):
        parse_config(SMALL.replace("n_range = [3, 5]", "n_range = [3, 90]"))
    with pytest.raises(ConfigError, match="unknown policy kind"):
        parse_config(SMALL.replace('kind = "fcfs"', 'kind = "sjf"'))
    with pytest.raises(ConfigError, match="contradictory"):
        parse_config(SMALL.replace("s_range = [1, 3]", "s_range = [1, 9]"))
    with pytest.raises(ConfigError):
        parse_config("name = [")


@pytest.mark.parametrize("name", sorted(p.name for p in bundled_config("").iterdir()
                                        if p.suffix == ".toml"))
def test_bundled_configs_parse(name):
    cfg = parse_config(bundled_config(name).read_text(), name)
    assert cfg.policies and cfg.trials >= 1


def test_run_writes_artifacts_and_summary_recomputes(tmp_path):
    cfg = parse_config(SMALL)
    summary = write_artifacts(cfg, run_experiment(cfg, jobs=1), tmp_path)
    rows = _read_rows(tmp_path / "results.csv")
    assert list(rows[0]) == list(RESULT_COLUMNS)
    assert len(rows) == 3 * 3
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk["policies"] == json.loads(json.dumps(summary["policies"]))
    for label, entry in on_disk["policies"].items():
        tels = [float(r["tel"]) for r in rows if r["policy"] == label and r["tel"]]
        assert entry["tel"]["mean"] == statistics.fmean(tels)
        assert entry["tel"]["std"] == statistics.pstdev(tels)
        assert entry["tel"]["min"] == min(tels) and entry["tel"]["max"] == max(tels)
        ratios = [float(r["ratio"]) for r in rows if r["policy"] == label and r["ratio"]]
        assert entry["ratio"]["mean"] == statistics.fmean(ratios)
    for r in rows:
        assert float(r["ratio"]) >= 1.0
        assert int(r["opt_lower"]) <= int(r["opt_upper"]) <= int(r["tel"])


def test_rows_replay_in_isolation(tmp_path):
    cfg = parse_config(SMALL)
    write_artifacts(cfg, run_experiment(cfg, jobs=1), tmp_path)
    rows = _read_rows(tmp_path / "results.csv")
    replay = run_cell(cfg, (2, None)).rows
    mine = [r for r in rows if r["trial"] == "2"]
    assert [{k: str(v) for k, v in r.items()} for r in replay] == mine


def test_results_are_byte_identical(tmp_path):
    cfg = parse_config(SMALL)
    write_artifacts(cfg, run_experiment(cfg, jobs=1), tmp_path / "a")
    write_artifacts(cfg, run_experiment(cfg, jobs=2), tmp_path / "b")
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
    assert (tmp_path / "a/summary.json").read_bytes() == (tmp_path / "b/summary.json").read_bytes()


def test_trace_run_with_timeline_and_throughput(tmp_path):
    cfg = parse_config(TRACE)
    summary = write_artifacts(cfg, run_experiment(cfg, jobs=1), tmp_path)
    assert (tmp_path / "memory_timeline.csv").exists() and (tmp_path / "throughput.csv").exists()
    assert "latency_slope" in summary["policies"]["mcsf"]
    tl = _read_rows(tmp_path / "memory_timeline.csv")
    assert all(int(r["occupancy"]) <= 16492 for r in tl)
    assert summary["policies"]["mcsf"]["livelocks"] == 0


def test_adversarial_rows(tmp_path):
    text = """\
name = "adv"
trials = 2
compute_hindsight = true

[generator]
model = "adversarial"
M_values = [16, 64]

[[policies]]
kind = "mcsf"
"""
    cfg = parse_config(text)
    write_artifacts(cfg, run_experiment(cfg, jobs=1), tmp_path)
    rows = _read_rows(tmp_path / "results.csv")
    assert [r["M"] for r in rows] == ["16", "64"]
    assert [r["solver_status"] for r in rows] == ["optimal", "optimal"]
    assert rows[1]["opt_upper"] == "142"
    assert (tmp_path / "ratio_vs_M.png").exists()


# ---------------------------------------------------------------- CLI


def test_cli_run_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("seed = 11", "seed = 11\nsed = 3"))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "bad.toml:4:" in err and "sed" in err
    assert main(["run", "--config", "no_such_config", "--out", str(tmp_path / "o")]) == 2


def test_cli_run_ok(tmp_path, capsys):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1",
                 "--trials", "1"]) == 0
    assert len(_read_rows(tmp_path / "o/results.csv")) == 3
    assert "wrote" in capsys.readouterr().out


@pytest.mark.parametrize("args", [
    ["--model", "all_at_once", "--n-range", "3", "5"],
    ["--model", "poisson", "--T-range", "5", "8"],
    ["--model", "adversarial", "--M", "16", "--b", "2"],
    ["--model", "trace", "--n", "20"],
])
def test_cli_gen_is_seed_deterministic(tmp_path, args):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen", "--seed", "7", *args, "--out", str(a)]) == 0
    assert main(["gen", "--seed", "7", *args, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    Instance.from_dict(json.loads(a.read_text()))


def test_cli_gen_contradictory_ranges(capsys):
    assert main(["gen", "--model", "all_at_once", "--seed", "1", "--M-range", "4", "6",
                 "--s-range", "1", "5"]) == 2
    assert "contradictory" in capsys.readouterr().err


def _pair_files(tmp_path, M, starts):
    inst = Instance(M, (Request(0, 0, 1, 1), Request(1, 0, 1, 1)))
    save_instance(inst, tmp_path / "inst.json")
    (tmp_path / "sched.json").write_text(json.dumps(Schedule(starts).to_dict()))
    return ["validate", "--instance", str(tmp_path / "inst.json"),
            "--schedule", str(tmp_path / "sched.json")]


def test_cli_validate(tmp_path, capsys):
    assert main(_pair_files(tmp_path, 4, {0: 0, 1: 0})) == 0
    assert "tel=2" in capsys.readouterr().out
    assert main(_pair_files(tmp_path, 3, {0: 0, 1: 0})) == 1
    assert "round 1: occupancy 4" in capsys.readouterr().out
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps(Instance(5).to_dict()))
    (tmp_path / "none.json").write_text(json.dumps({"start": {}}))
    assert main(["validate", "--instance", str(empty), "--schedule", str(tmp_path / "none.json")]) == 0
    assert main(["validate", "--instance", str(tmp_path / "missing.json"),
                 "--schedule", str(tmp_path / "none.json")]) == 2


def test_cli_solve(tmp_path, capsys):
    inst = Instance(4, (Request(0, 0, 1, 1), Request(1, 0, 1, 2)))
    save_instance(inst, tmp_path / "i.json")
    out = tmp_path / "s.json"
    assert main(["solve", "--instance", str(tmp_path / "i.json"), "--out", str(out),
                 "--lp", str(tmp_path / "m.lp")]) == 0
    payload = json.loads(out.read_text())
    assert payload["tel"] == 3 and payload["bound"]["optimal"] is True
    assert (tmp_path / "m.lp").exists()
    # the solved schedule validates through the CLI too
    (tmp_path / "sched.json").write_text(json.dumps(payload))
    capsys.readouterr()
    assert main(["validate", "--instance", str(tmp_path / "i.json"),
                 "--schedule", str(tmp_path / "sched.json")]) == 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "kvsched.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "run" in proc.stdout
