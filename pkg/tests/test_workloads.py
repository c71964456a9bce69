import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvsched.core import Instance, Request
from kvsched.workloads import (
    NOISE_PRESETS,
    PROMPT_MEAN,
    PROMPT_MEDIAN,
    GenSpec,
    GenSpecError,
    TraceFormatError,
    TraceRecord,
    TraceSpec,
    apply_prediction_noise,
    gen_adversarial,
    gen_all_at_once,
    gen_poisson,
    load_instance,
    load_trace,
    make_rng,
    poisson_inverse,
    save_instance,
    synth_trace_records,
    trace_to_instance,
    write_trace,
)


def test_all_at_once_paper_ranges():
    inst = gen_all_at_once(GenSpec(seed=4))
    assert 30 <= inst.memory_limit <= 50 and 40 <= inst.n <= 60
    for r in inst.requests:
        assert r.arrival == 0 and 1 <= r.prompt_size <= 5
        assert 1 <= r.output_len <= inst.memory_limit - r.prompt_size


def test_all_at_once_single_request():
    inst = gen_all_at_once(GenSpec(seed=1, n_range=(1, 1)))
    assert inst.n == 1 and inst.requests[0].arrival == 0


@given(st.integers(0, 10**6))
def test_generators_are_seed_deterministic(seed):
    for model in ("all_at_once", "poisson"):
        spec = GenSpec(model=model, seed=seed, n_range=(3, 8), T_range=(5, 10))
        gen = gen_all_at_once if model == "all_at_once" else gen_poisson
        assert gen(spec) == gen(spec)


def test_contradictory_ranges_rejected():
    with pytest.raises(GenSpecError, match="contradictory"):
        GenSpec(M_range=(4, 10), s_range=(1, 5))
    with pytest.raises(GenSpecError):
        GenSpec(n_range=(5, 2))
    with pytest.raises(GenSpecError):
        GenSpec(epsilon=1.0)


def test_poisson_vanishing_rate():
    inst = gen_poisson(GenSpec(model="poisson", seed=3, T_range=(50, 50), lambda_range=(1e-9, 1e-9)))
    assert inst.n == 0


def test_poisson_paper_ranges():
    inst = gen_poisson(GenSpec(model="poisson", seed=8))
    assert all(1 <= r.arrival <= 60 for r in inst.requests)


def test_poisson_mean_matches_rate():
    lam, T, k = 1.0, 50, 1000
    counts = [gen_poisson(GenSpec(model="poisson", seed=s, T_range=(T, T),
                                  lambda_range=(lam, lam))).n for s in range(k)]
    sigma = math.sqrt(lam * T / k)
    assert abs(statistics.fmean(counts) - lam * T) <= 3 * sigma


def test_poisson_inverse_moments():
    rng = make_rng(5)
    draws = [poisson_inverse(rng, 3.5) for _ in range(20000)]
    assert statistics.fmean(draws) == pytest.approx(3.5, abs=0.06)
    assert statistics.pvariance(draws) == pytest.approx(3.5, abs=0.15)


def test_adversarial_examples():
    inst = gen_adversarial(16, 0)
    long, shorts = inst.requests[0], inst.requests[1:]
    assert (long.arrival, long.prompt_size, long.output_len) == (0, 1, 15)
    assert len(shorts) == 8 and all(r.arrival == 14 and r.output_len == 1 for r in shorts)
    small = gen_adversarial(4, 0)
    assert small.requests[0].output_len == 3 and [r.arrival for r in small.requests[1:]] == [3, 3]
    assert gen_adversarial(64, 5).n == 33
    with pytest.raises(GenSpecError):
        gen_adversarial(3, 0)


@pytest.mark.parametrize("M", [16, 64])
def test_adversarial_arithmetic(M):
    """A long request started at b leaves at most one token per round for the shorts
    until it finishes, so at least M/4 shorts wait sqrt(M)/2 rounds or more."""
    root = math.isqrt(M)
    for b in (0, 3):
        inst = gen_adversarial(M, b)
        release = inst.requests[1].arrival
        long_end = b + M - 1
        assert long_end - release == root // 2 - 1
        # while the long request runs, it holds 1 + (t - b) tokens at round t,
        # leaving M - 1 - (t - b) for the shorts; each short needs 2
        free = [M - 1 - (t - b) for t in range(release + 1, long_end + 1)]
        served = sum(f // 2 for f in free)
        assert M // 2 - served >= M // 4


def test_trace_round_trip(tmp_path):
    recs = [TraceRecord(0, 3, 5), TraceRecord(1, 7, 1), TraceRecord(2, 2, 9)]
    path = tmp_path / "t.jsonl"
    write_trace(recs, path)
    assert list(load_trace(path)) == recs


def test_trace_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "prompt_tokens": 3, "output_tokens": 4}\n{"id": 1, "prompt_tokens": "x"}\n')
    with pytest.raises(TraceFormatError, match="line 2"):
        load_trace(path)


def test_trace_zero_token_rows_skipped(tmp_path):
    path = tmp_path / "z.jsonl"
    rows = [{"id": 0, "prompt_tokens": 3, "output_tokens": 0},
            {"id": 1, "prompt_tokens": 3, "output_tokens": 2}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    recs = load_trace(path)
    assert [r.id for r in recs] == [1] and recs.skipped == 1


def test_trace_random_k_is_seeded(tmp_path):
    path = tmp_path / "c.jsonl"
    write_trace(synth_trace_records(50, seed=2), path)
    a = load_trace(path, ("random_k", 5, 9))
    b = load_trace(path, ("random_k", 5, 9))
    assert len(a) == 5 and list(a) == list(b)


def test_synthetic_corpus_statistics():
    recs = synth_trace_records(10_000, seed=0)
    prompts = [r.prompt_tokens for r in recs]
    assert statistics.median(prompts) == pytest.approx(PROMPT_MEDIAN, abs=1)
    assert statistics.fmean(prompts) == pytest.approx(PROMPT_MEAN, rel=0.1)


def test_trace_to_instance_single_record():
    rec = [TraceRecord(0, 4, 6)]
    inst = trace_to_instance(rec, 2.0, 5.0, seed=3)
    gap = make_rng(3).exponential(0.5, 1)[0]
    assert inst.requests[0].arrival == math.floor(gap * 5.0)


def test_trace_identity_time_mapping():
    recs = synth_trace_records(30, seed=1)
    inst = trace_to_instance(recs, 10.0, 1.0, seed=4)
    secs = np.cumsum(make_rng(4).exponential(0.1, 30))
    assert sorted(r.arrival for r in inst.requests) == sorted(math.floor(s) for s in secs)


def test_trace_presets_build():
    hi = TraceSpec(n=200, lambda_per_second=50.0, rounds_per_second=5.0).build(1)
    lo = TraceSpec(n=200, lambda_per_second=10.0, rounds_per_second=5.0).build(1)
    assert hi.n == lo.n == 200
    assert hi.requests[-1].arrival < lo.requests[-1].arrival


def test_noise_zero_is_identity():
    inst = gen_all_at_once(GenSpec(seed=2))
    assert apply_prediction_noise(inst, 0.0, "two_sided", 1) == inst


@pytest.mark.parametrize("eps", NOISE_PRESETS)
def test_noise_two_sided_range(eps):
    inst = gen_all_at_once(GenSpec(seed=5, n_range=(200, 200)))
    noisy = apply_prediction_noise(inst, eps, "two_sided", 7, cap_to_memory=False)
    for r in noisy.requests:
        lo = max(1, math.floor((1 - eps) * r.output_len + 0.5))
        hi = math.floor((1 + eps) * r.output_len + 0.5)
        assert lo <= r.predicted_len <= hi
    assert [r.output_len for r in noisy.requests] == [r.output_len for r in inst.requests]


@settings(max_examples=50)
@given(st.integers(0, 10**6))
def test_noise_overestimate_ratio(seed):
    inst = gen_all_at_once(GenSpec(seed=seed))
    noisy = apply_prediction_noise(inst, 0.5, "overestimate", seed, cap_to_memory=False)
    for r in noisy.requests:
        assert 1 <= r.predicted_len / r.output_len <= 1.5


def test_noise_is_seeded_and_validated():
    inst = gen_all_at_once(GenSpec(seed=6))
    assert apply_prediction_noise(inst, 0.8, "two_sided", 3) == apply_prediction_noise(inst, 0.8, "two_sided", 3)
    with pytest.raises(GenSpecError):
        apply_prediction_noise(inst, 1.0, "two_sided", 0)
    with pytest.raises(GenSpecError):
        apply_prediction_noise(inst, -0.1, "overestimate", 0)


def test_noise_cap_keeps_true_length():
    inst = Instance(10, (Request(0, 0, 2, 8),))
    noisy = apply_prediction_noise(inst, 0.9, "overestimate", 0)
    assert noisy.requests[0].predicted_len == 8


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.sampled_from(["all_at_once", "poisson"]))
def test_generated_instances_are_valid(seed, model):
    spec = GenSpec(model=model, seed=seed, epsilon=0.5, noise_mode="overestimate")
    inst = gen_all_at_once(spec) if model == "all_at_once" else gen_poisson(spec)
    Instance(inst.memory_limit, inst.requests)  # re-validates
    assert inst.servable


def test_instance_file_round_trip(tmp_path):
    inst = gen_poisson(GenSpec(model="poisson", seed=12))
    save_instance(inst, tmp_path / "i.json")
    assert load_instance(tmp_path / "i.json") == inst
