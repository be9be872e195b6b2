import csv
import io
import json

import numpy as np
import pytest

from nzlab.core import ValidationError, random_density
from nzlab.experiments import (
    CSV_HEADER,
    EXIT_FAIL,
    EXIT_PASS,
    EXIT_USAGE,
    StudyConfig,
    build_model,
    check_centered,
    default_eta,
    factorization_decay,
    run_cli,
    scaling_study,
    secular_demo,
)
from nzlab.model import SIGMA_X, WindowError, encode_matrix

SMALL_FRIEDRICHS = {"builder": "friedrichs", "params": {"N": 8, "band": [0.7, 1.3], "g": 0.05}}


def _cfg(**kw):
    doc = {"model": SMALL_FRIEDRICHS, "lambdas": [0.4, 0.2], "tau_grid": [0.0, 0.5, 1.0], "seed": 0}
    doc.update(kw)
    return StudyConfig.from_dict(doc)


def test_study_without_interaction():
    cfg = _cfg(model={"builder": "friedrichs", "params": {"N": 8, "g": 0.0}},
               recipe={"kind": "controlled"}, eta=0.05)
    res = scaling_study(cfg)
    for r in res.rows:
        assert r["d_markov"] < 1e-12 and r["i_norm"] == 0.0
    for lam in cfg.lambdas:
        q = res.column("q_norm", lam)
        assert np.ptp(q) < 1e-12


def test_study_factorized_state_has_no_correlation_term():
    res = scaling_study(_cfg(recipe={"kind": "factorized",
                                     "params": {"rho_S": encode_matrix(np.diag([0.9, 0.1]))}}))
    assert max(r["i_norm"] for r in res.rows) < 1e-14
    assert max(r["q_norm"] for r in res.rows if r["tau"] == 0.0) < 1e-14


def test_study_csv_layout():
    res = scaling_study(_cfg())
    rows = list(csv.reader(io.StringIO(res.csv_text())))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 2 * 3
    assert [float(r[0]) for r in rows[1:]] == [0.4] * 3 + [0.2] * 3
    back = np.array([[float(x) for x in r] for r in rows[1:]])
    want = np.array([[r[k] for k in CSV_HEADER] for r in res.rows])
    assert np.array_equal(back, want)


def test_study_rejects_window_violation():
    with pytest.raises(WindowError, match="lambda=0.01"):
        scaling_study(_cfg(lambdas=[0.4, 0.01]))


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(lambdas=[0.2, -0.1])
    with pytest.raises(ValueError):
        StudyConfig.from_dict({"lambdas": [0.1]})
    spec = build_model(SMALL_FRIEDRICHS)
    with pytest.raises(ValueError):
        _cfg(tau_grid=[0.0, 1.0, 0.5]).validate(spec)
    assert _cfg(output="a").digest() == _cfg(output="b").digest()
    assert _cfg(seed=1).digest() != _cfg(seed=2).digest()


def test_default_eta_is_level_spacing():
    spec = build_model(SMALL_FRIEDRICHS)
    assert default_eta(spec) == pytest.approx(0.6 / 7)
    assert default_eta(spec, 2.0) == pytest.approx(1.2 / 7)


def test_uncentered_model_rejected():
    spec = build_model({"builder": "small", "params": {}})
    bad = spec.with_interaction(np.kron(SIGMA_X, np.eye(spec.dimB)))
    with pytest.raises(ValidationError, match="not centered"):
        check_centered(bad)


def _secular_cfg(wrong, points=41):
    return StudyConfig.from_dict({"model": {"builder": "spin_bath", "params": {"N": 3, "beta": 1.0}},
                                  "wrong_reference": wrong, "secular": {"points": points}})


def test_secular_reference_equal_to_correct_one_has_no_slope():
    spec = build_model({"builder": "spin_bath", "params": {"N": 3, "beta": 1.0}})
    rep = secular_demo(_secular_cfg({"matrix": encode_matrix(spec.omega_B)}))
    assert abs(rep["fit_wrong"]["slope"]) <= 1e-6 * rep["operand_norm"]
    assert rep["criteria"]["correct_slope_bounded"]["passed"]


def test_secular_wrong_reference_grows():
    rep = secular_demo(_secular_cfg({"beta": 0.0}))
    assert rep["fit_wrong"]["slope"] > 0
    assert rep["fit_wrong_secular_block"]["max_residual_fraction"] < 1e-10


def test_secular_input_errors(rng):
    with pytest.raises(ValueError, match="at least 4"):
        secular_demo(_secular_cfg({"beta": 0.0}, points=1))
    with pytest.raises(ValidationError):
        secular_demo(_secular_cfg({"matrix": encode_matrix(random_density(8, rng))}))


def test_factorization_decay_shape():
    rep = factorization_decay(_cfg())
    assert rep["lambdas"] == [0.4, 0.2]
    assert set(rep["q_norm"]) == {"0.4", "0.2"}
    assert rep["criteria"]["q_norm_tau0_constant"]["passed"]


# --- CLI --------------------------------------------------------------------------


def test_cli_check_passes(capsys):
    assert run_cli(["check"]) == EXIT_PASS
    assert json.loads(capsys.readouterr().out)["passed"]


def test_cli_usage_errors(tmp_path, capsys):
    assert run_cli(["study"]) == EXIT_USAGE
    assert run_cli(["bogus"]) == EXIT_USAGE
    assert run_cli(["study", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": SMALL_FRIEDRICHS, "lambdas": [0.01], "tau_grid": [0, 1]}))
    assert run_cli(["study", "--config", str(cfg)]) == EXIT_USAGE
    assert "exceeds the usable bath window" in capsys.readouterr().err


def test_cli_study_writes_files(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": SMALL_FRIEDRICHS, "lambdas": [0.4], "tau_grid": [0, 0.5]}))
    code = run_cli(["study", "--config", str(cfg), "--output", str(tmp_path / "out")])
    assert code in (EXIT_PASS, EXIT_FAIL)
    text = (tmp_path / "out" / "study.csv").read_text()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["passed"] == (code == EXIT_PASS)
    assert len(report["metadata"]["config_sha256"]) == 64


def test_cli_secular_exit_reflects_criteria(tmp_path):
    assert run_cli(["secular", "--output", str(tmp_path)]) == EXIT_FAIL
    rep = json.loads((tmp_path / "secular.json").read_text())
    assert rep["criteria"]["correct_slope_bounded"]["passed"]


def test_cli_generator_and_simulate(tmp_path):
    assert run_cli(["generator", "--N", "8", "--output", str(tmp_path)]) == EXIT_PASS
    gen = json.loads((tmp_path / "generator.json").read_text())
    assert gen["decay_rate_excited"] > 0
    assert run_cli(["simulate", "--model", "small", "--t-max", "5", "--points", "6",
                    "--output", str(tmp_path)]) == EXIT_PASS
    traj = json.loads((tmp_path / "trajectory.json").read_text())
    assert all(sum(p) == pytest.approx(1.0) for p in traj["populations"])
