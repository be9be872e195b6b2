"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nzlab.experiments import (
    StudyConfig,
    build_recipe,
    mixing_report,
    run_cli,
    scaling_study,
    secular_demo,
)
from nzlab.liouville import bohr_decomposition, build_projectors, verify_projector_algebra
from nzlab.model import build_correlated_state, build_friedrichs_model, build_small_model, build_spin_bath_model
from nzlab.nz import decay_rate, nz_exactness, vanhove_generator, verify_recurrence

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "friedrichs_study.json"


def record(n, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture(scope="module")
def study():
    t0 = time.perf_counter()
    res = scaling_study(StudyConfig.load(CONFIG))
    return res, time.perf_counter() - t0


def test_criterion_1_projector_algebra():
    t0 = time.perf_counter()
    s = build_spin_bath_model(3, 1.0)
    rep = verify_projector_algebra(build_projectors(s), s, probes=20, seed=0)
    dt = time.perf_counter() - t0
    ok = rep["max_residual"] <= 1e-9 and dt < 5
    assert record(1, ok, f"max residual {rep['max_residual']:.2e} (tol 1e-9), {dt:.2f} s (limit 5 s)")


def test_criterion_2_nz_exactness():
    s = build_small_model(0.3)
    pair, bohr = build_projectors(s), bohr_decomposition(s.H_S)
    rho0 = build_correlated_state(s, build_recipe(s, {"kind": "controlled"}, 0))
    lam = 0.3
    t0 = time.perf_counter()
    rep = nz_exactness(pair, s, bohr, rho0, lam ** 2 * np.linspace(0, 10, 1001), lam, 0.01)
    dt = time.perf_counter() - t0
    ok = rep["max_trace_distance"] <= 1e-5 and dt < 60
    assert record(2, ok, f"max trace distance {rep['max_trace_distance']:.2e} over 1001 grid points "
                         f"(tol 1e-5), {dt:.1f} s (limit 60 s)")


def test_criterion_3_recurrence():
    s = build_small_model(0.3)
    pair, bohr = build_projectors(s), bohr_decomposition(s.H_S)
    t0 = time.perf_counter()
    reps = [verify_recurrence(pair, s, bohr, m, 1.0, 0.2) for m in range(len(bohr))]
    dt = time.perf_counter() - t0
    resid = max(r["residual"] for r in reps)
    growth = max(r["convolution_growth"] for r in reps)
    res_ok = resid <= 1e-6
    conv_ok = all(r["convolution_max_doubled"] <= r["convolution_max_window"] for r in reps)
    ok = res_ok and conv_ok and dt < 60
    assert record(3, ok, f"recurrence residual {resid:.2e} (tol 1e-6, {'ok' if res_ok else 'fails'}); "
                         f"convolution max-norm growth factor {growth:.4f} on doubling "
                         f"(needs <= 1, {'ok' if conv_ok else 'fails'}); {dt:.1f} s")


def test_criterion_4_correlation_term(study):
    res, dt = study
    c = res.criteria["i_norm_decreasing"]
    ok = c["passed"] and dt < 300
    vals = ", ".join(f"{v:.4f}" for v in c["values"])
    rat = ", ".join(f"{r:.3f}" for r in c["ratios"])
    assert record(4, ok, f"max ||I|| = [{vals}] for lambda 0.4, 0.2, 0.1; ratios [{rat}] "
                         f"(band [0.3, 0.8]); study {dt:.0f} s (limit 300 s)")


def test_criterion_5_van_hove(study):
    res, _ = study
    d = res.criteria["d_markov_decreasing"]
    g = res.criteria["generator_stable"]
    ok = d["passed"] and g["passed"]
    vals = ", ".join(f"{v:.5f}" for v in d["values"])
    assert record(5, ok, f"d_markov(tau=2) = [{vals}] (needs strict decrease and last < half of first); "
                         f"rate change under eta -> 2 eta {g['rate_change']:.3f} (limit 0.3); "
                         f"eta = {res.summary['eta']:.5f}")


def test_criterion_6_golden_rule():
    s = build_friedrichs_model(40)
    t0 = time.perf_counter()
    pair, bohr = build_projectors(s), bohr_decomposition(s.H_S)
    eta = 2 * np.pi / s.window.t_rec
    rate = decay_rate(vanhove_generator(pair, s, bohr, eta))
    dt = time.perf_counter() - t0
    g = np.asarray(s.meta["couplings"])
    golden = 2 * np.pi * float(np.mean(g ** 2)) / s.meta["spacing"]
    err = abs(rate - golden) / golden
    ok = err < 0.15 and dt < 60
    assert record(6, ok, f"decay rate {rate:.4f} vs 2 pi g^2 / spacing {golden:.4f}, relative error "
                         f"{err:.3f} (limit 0.15), {dt:.1f} s (limit 60 s)")


def test_criterion_7_factorization(study):
    res, _ = study
    q1 = res.criteria["q_norm_tau1_decreasing"]
    q0 = res.criteria["q_norm_tau0_constant"]
    ok = q1["passed"] and q0["passed"]
    vals = ", ".join(f"{v:.4f}" for v in q1["values"])
    loc = ", ".join(f"{v:.4f}" for v in res.extras["q_local_tau1"])
    assert record(7, ok, f"q_norm(tau=1) = [{vals}] (needs strict decrease, "
                         f"{'ok' if q1['passed'] else 'fails'}); q_norm(tau=0) spread {q0['spread']:.1e} "
                         f"(tol 1e-12); local-observable q(tau=1) = [{loc}]")


def test_criterion_8_secular():
    cfg = StudyConfig.from_dict({"model": {"builder": "spin_bath", "params": {"N": 3, "beta": 1.0}},
                                 "wrong_reference": {"beta": 0.0}})
    rep = secular_demo(cfg)
    c, w = rep["criteria"]["correct_slope_bounded"], rep["criteria"]["wrong_slope_linear"]
    assert record(8, rep["passed"],
                  f"correct-projector relative slope {c['relative_slope']:.1e} (tol 1e-6, "
                  f"{'ok' if c['passed'] else 'fails'}); wrong-reference slope {w['slope']:.4f} with max "
                  f"linear-fit residual {w['max_residual_fraction']:.4f} of range (tol 0.01, "
                  f"{'ok' if w['passed'] else 'fails'})")


def test_criterion_9_mixing():
    s = build_friedrichs_model(40)
    rep = mixing_report(s)
    a, f = rep["autocorrelation"], rep["free_factorization"]
    assert record(9, rep["passed"],
                  f"autocorrelation decay time {a['decay_time']:.1f} < window {a['usable_window']:.1f}; "
                  f"free-factorization tail {f['tail_deviation']:.4f} vs 0.05 x initial "
                  f"{f['initial_deviation']:.4f}")


def test_criterion_10_determinism(tmp_path):
    doc = {
        "model": {"builder": "friedrichs", "params": {"N": 8, "band": [0.7, 1.3], "g": 0.05}},
        "recipe": {"kind": "controlled", "params": {"theta": 0.5}},
        "lambdas": [0.4, 0.2],
        "tau_grid": {"start": 0.0, "stop": 1.0, "num": 5},
        "seed": 3,
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    codes = [run_cli(["study", "--config", str(cfg), "--output", str(tmp_path / k)]) for k in "ab"]
    a, b = ((tmp_path / k / "study.csv").read_bytes() for k in "ab")
    ok = a == b and all(c in (0, 1) for c in codes)
    assert record(10, ok, f"two study runs: CSV {'bit-identical' if a == b else 'differs'} "
                          f"({len(a)} bytes), exit codes {codes}")
