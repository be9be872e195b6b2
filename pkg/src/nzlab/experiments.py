"""Scenario runner and command-line interface.

Studies are driven by a :class:`StudyConfig` (JSON) and produce plain
files: ``study.csv`` with the fixed header ``lambda,tau,d_markov,i_norm,q_norm``
and ``report.json`` with per-criterion pass flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import sqrtm

from .core import DimensionError, ValidationError, partial_trace_bath, trace_distance
from .frame import EigenFrame
from .liouville import bohr_decomposition, build_projectors, verify_projector_algebra
from .mixing import (
    bath_autocorrelation,
    bath_spectrum_report,
    decay_time,
    free_factorization_check,
    friedrichs_field_operators,
    local_panel,
    relaxation_check,
)
from .model import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    CorrelatedStateRecipe,
    ModelSpec,
    WindowError,
    build_correlated_state,
    build_friedrichs_model,
    build_small_model,
    build_spin_bath_model,
    center_interaction,
    controlled_coupling,
    decode_matrix,
    encode_matrix,
    friedrichs_correlated_recipe,
    mean_field,
    thermal_state,
)
from .nz import (
    correlation_series,
    decay_rate,
    frame_dense,
    interaction_picture_exact,
    markov_propagate,
    memory_kernel,
    nz_exactness,
    propagate_exact,
    R_operator,
    vanhove_generator,
    verify_recurrence,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("lambda", "tau", "d_markov", "i_norm", "q_norm")
PAULI = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration

def build_model(desc: dict) -> ModelSpec:
    """Model from ``{"builder": name, "params": {...}}`` or ``{"spec": <ModelSpec JSON>}``."""
    if "spec" in desc:
        return ModelSpec.from_dict(desc["spec"])
    name = desc.get("builder", "friedrichs")
    p = dict(desc.get("params", {}))
    if name == "friedrichs":
        if "band" in p:
            p["band"] = tuple(p["band"])
        if "g" in p:
            p["coupling_profile"] = p.pop("g")
        return build_friedrichs_model(**p)
    if name == "spin_bath":
        p.setdefault("beta", 1.0)
        return build_spin_bath_model(**p)
    if name == "small":
        return build_small_model(**p)
    raise ValueError(f"unknown model builder {name!r}")


def build_recipe(spec: ModelSpec, desc: dict | None, seed: int) -> CorrelatedStateRecipe:
    desc = desc or {"kind": "friedrichs_wavepacket" if spec.name == "friedrichs" else "controlled"}
    kind = desc.get("kind")
    p = desc.get("params", {})
    eyeB = np.eye(spec.dimB)
    if kind == "friedrichs_wavepacket":
        return friedrichs_correlated_recipe(spec, **p)
    if kind == "factorized":
        rho_S = decode_matrix(p["rho_S"]) if "rho_S" in p else np.eye(spec.dimS) / spec.dimS
        return CorrelatedStateRecipe([np.kron(sqrtm(rho_S), eyeB)])
    if kind == "controlled":
        rng = np.random.default_rng(seed)
        A = PAULI[p.get("axis", "x")] if spec.dimS == 2 else np.eye(spec.dimS)
        if "B_op" in p:
            B = decode_matrix(p["B_op"])
        else:
            B = rng.normal(size=(spec.dimB, spec.dimB)) + 1j * rng.normal(size=(spec.dimB, spec.dimB))
            B = 0.5 * (B + B.conj().T)
        rho_S = decode_matrix(p["rho_S"]) if "rho_S" in p else np.diag([0.7] + [0.3 / max(spec.dimS - 1, 1)] * (spec.dimS - 1))
        U = controlled_coupling(float(p.get("theta", 0.5)), A, B)
        return CorrelatedStateRecipe([U @ np.kron(sqrtm(rho_S), eyeB)])
    if kind == "ops":
        return CorrelatedStateRecipe([decode_matrix(L) for L in p["ops_L"]], p.get("normalize", True))
    raise ValueError(f"unknown recipe kind {kind!r}")


def _tau_grid(value) -> np.ndarray:
    if isinstance(value, dict):
        return np.linspace(float(value["start"]), float(value["stop"]), int(value["num"]))
    grid = np.asarray(value, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("tau_grid must be a non-empty list")
    return grid


@dataclass
class StudyConfig:
    model: dict
    lambdas: list
    tau_grid: np.ndarray
    recipe: dict | None = None
    eta: float | None = None
    dt: float | None = None
    wrong_reference: dict | None = None
    seed: int = 0
    output: str | None = None
    workers: int = 1
    secular: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        if "model" not in doc:
            raise ValueError("config needs a 'model' entry")
        lambdas = [float(x) for x in doc.get("lambdas", [])]
        if any(not x > 0 for x in lambdas):
            raise ValueError(f"every lambda must be positive, got {lambdas}")
        return cls(
            model=doc["model"],
            lambdas=lambdas,
            tau_grid=_tau_grid(doc.get("tau_grid", [0.0])),
            recipe=doc.get("recipe"),
            eta=doc.get("eta"),
            dt=doc.get("dt"),
            wrong_reference=doc.get("wrong_reference"),
            seed=int(doc.get("seed", 0)),
            output=doc.get("output"),
            workers=int(doc.get("workers", 1)),
            secular=dict(doc.get("secular", {})),
            raw=doc,
        )

    @classmethod
    def load(cls, path: str | Path) -> "StudyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        doc = dict(self.raw)
        doc["seed"] = self.seed
        doc.pop("output", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()

    def validate(self, spec: ModelSpec) -> None:
        """Reject lambdas whose largest t = tau / lambda^2 leaves the usable bath window."""
        if np.any(np.diff(self.tau_grid) <= 0) or self.tau_grid.min() < 0:
            raise ValueError("tau_grid must be non-negative and strictly increasing")
        tmax = float(self.tau_grid.max())
        for lam in self.lambdas:
            spec.check_time(tmax / lam ** 2, f"lambda={lam:g}: tau_max/lambda^2 =")


def default_eta(spec: ModelSpec, factor: float = 1.0) -> float:
    """factor x (smallest bath level gap), the comb spacing the regularization must blur."""
    if spec.window is None:
        raise ValueError("model has no finite bath spacing; pass eta explicitly")
    return factor * 2 * np.pi / spec.window.t_rec


def check_centered(spec: ModelSpec, tol: float = 1e-10) -> None:
    res = float(np.linalg.norm(mean_field(spec)))
    if res > tol:
        raise ValidationError(f"model is not centered (||tr_B[(1 x Omega_B) H_SB]|| = {res:.3e}); "
                              "apply center_interaction first")


# ---------------------------------------------------------------------------
# studies

@dataclass
class StudyResult:
    rows: list
    extras: dict
    summary: dict
    criteria: dict
    metadata: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([f"{r[k]:.17g}" for k in CSV_HEADER])
        return buf.getvalue()

    def to_report(self) -> dict:
        return {"criteria": self.criteria, "summary": self.summary,
                "extras": self.extras, "metadata": self.metadata,
                "passed": all(c["passed"] for c in self.criteria.values())}

    def write(self, outdir: str | Path) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "study.csv").write_text(self.csv_text())
        (out / "report.json").write_text(json.dumps(self.to_report(), indent=2, sort_keys=True))

    def column(self, key: str, lam: float) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["lambda"] == lam])


def generator_rates(gen) -> np.ndarray:
    """Relaxation rates -Re(spectrum of K), zero modes dropped, ascending."""
    ev = np.linalg.eigvals(gen.K)
    r = -ev.real
    return np.sort(r[r > 1e-10 * max(np.abs(ev).max(), 1e-300)])


def _q_local(pair, panel, rho) -> float:
    if not panel:
        return float("nan")
    Qr = pair.Q(rho)
    return float(max(abs(np.trace(D @ Qr)) for D in panel))


def _lambda_point(spec, pair, bohr, rho0, taus, lam, dt, markov_states, panel):
    t0 = time.perf_counter()
    ex = interaction_picture_exact(spec, bohr, rho0, taus, lam)
    d = [trace_distance(a, b) for a, b in zip(ex.states, markov_states)]
    I = correlation_series(pair, spec, bohr, rho0, taus, lam, dt)
    full = propagate_exact(spec.with_coupling(lam), rho0, taus / lam ** 2)
    q = [float(np.linalg.norm(pair.Q(r))) for r in full.states]
    ql = [_q_local(pair, panel, r) for r in full.states]
    return {
        "d_markov": d, "i_norm": [float(np.linalg.norm(x)) for x in I], "q_norm": q,
        "q_local": ql, "seconds": time.perf_counter() - t0,
    }


def _strictly_decreasing(v) -> bool:
    return bool(all(a > b for a, b in zip(v, v[1:])))


def scaling_study(cfg: StudyConfig, spec: ModelSpec | None = None) -> StudyResult:
    """Exact reduced dynamics against the van Hove Markov prediction for each coupling."""
    spec = build_model(cfg.model) if spec is None else spec
    check_centered(spec)
    cfg.validate(spec)
    if not cfg.lambdas:
        raise ValueError("study needs at least one lambda")
    pair = build_projectors(spec)
    bohr = bohr_decomposition(spec.H_S, spec.tolerances.degeneracy_tol * max(np.linalg.norm(spec.H_S, 2), 1.0))
    recipe = build_recipe(spec, cfg.recipe, cfg.seed)
    rho0, trace_factor = build_correlated_state(spec, recipe, return_trace=True)
    taus = cfg.tau_grid
    eta = cfg.eta if cfg.eta is not None else default_eta(spec)

    t0 = time.perf_counter()
    gen = vanhove_generator(pair, spec, bohr, eta)
    gen2 = vanhove_generator(pair, spec, bohr, 2 * eta, check_route=False)
    rS0 = partial_trace_bath(rho0, spec.dimS, spec.dimB)
    markov = markov_propagate(gen, rS0, taus)
    panel = local_panel(spec) if spec.name == "friedrichs" else []
    gen_seconds = time.perf_counter() - t0

    run = lambda lam: _lambda_point(spec, pair, bohr, rho0, taus, lam, cfg.dt, markov.states, panel)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            points = list(ex.map(run, cfg.lambdas))
    else:
        points = [run(lam) for lam in cfg.lambdas]

    rows = []
    order = sorted(range(len(cfg.lambdas)), key=lambda i: -cfg.lambdas[i])
    for i in order:
        lam, pt = cfg.lambdas[i], points[i]
        for j, tau in enumerate(taus):
            rows.append({"lambda": lam, "tau": float(tau), "d_markov": pt["d_markov"][j],
                         "i_norm": pt["i_norm"][j], "q_norm": pt["q_norm"][j]})
    lams = [cfg.lambdas[i] for i in order]
    pts = [points[i] for i in order]
    r1, r2 = generator_rates(gen), generator_rates(gen2)
    rate_change = float(np.max(np.abs(r2 - r1) / r1)) if r1.size and r1.size == r2.size else float("nan")
    d_end = [p["d_markov"][-1] for p in pts]
    i_max = [max(p["i_norm"]) for p in pts]
    ratios = [b / a if a > 0 else float("nan") for a, b in zip(i_max, i_max[1:])]
    q0 = [p["q_norm"][0] for p in pts]
    summary = {
        "lambdas": lams, "tau_end": float(taus[-1]), "eta": eta,
        "d_markov_end": d_end, "i_norm_max": i_max, "i_norm_ratios": ratios,
        "q_norm_tau0": q0, "rates": r1.tolist(), "rates_2eta": r2.tolist(),
        "rate_change_2eta": rate_change, "route_discrepancy": gen.meta.get("route_discrepancy"),
    }
    criteria = {
        "i_norm_decreasing": {"passed": _strictly_decreasing(i_max) and all(0.3 <= r <= 0.8 for r in ratios),
                              "values": i_max, "ratios": ratios, "band": [0.3, 0.8]},
        "d_markov_decreasing": {"passed": _strictly_decreasing(d_end) and len(d_end) > 1
                                and d_end[-1] < 0.5 * d_end[0], "values": d_end},
        "generator_stable": {"passed": bool(rate_change < 0.3), "rate_change": rate_change, "limit": 0.3},
        "q_norm_tau0_constant": {"passed": bool(np.ptp(q0) <= 1e-12), "spread": float(np.ptp(q0))},
    }
    k1 = np.nonzero(np.isclose(taus, 1.0))[0]
    extras = {"q_local": {f"{lam:g}": p["q_local"] for lam, p in zip(lams, pts)}}
    if k1.size:
        qn = [p["q_norm"][k1[0]] for p in pts]
        ql = [p["q_local"][k1[0]] for p in pts]
        criteria["q_norm_tau1_decreasing"] = {"passed": _strictly_decreasing(qn), "values": qn}
        extras["q_local_tau1"] = ql
        extras["q_local_tau1_decreasing"] = _strictly_decreasing(ql)
    if spec.name == "friedrichs" and spec.meta.get("spacing"):
        g = np.asarray(spec.meta["couplings"])
        golden = 2 * np.pi * float(np.mean(g ** 2)) / spec.meta["spacing"]
        rate = decay_rate(gen)
        err = abs(rate - golden) / golden if golden > 0 else None
        extras["golden_rule"] = {"rate": rate, "golden": golden, "relative_error": err}
    metadata = {
        "config_sha256": cfg.digest(), "seed": cfg.seed, "model": spec.name, "D": spec.D,
        "t_rec": spec.window.t_rec if spec.window else None, "initial_trace_factor": trace_factor,
        "timings": {"generator": gen_seconds, **{f"lambda={lam:g}": p["seconds"] for lam, p in zip(lams, pts)}},
    }
    return StudyResult(rows, extras, summary, criteria, metadata)


def _wrong_reference(spec: ModelSpec, desc) -> np.ndarray:
    if desc is None:
        raise ValueError("secular demo needs a wrong_reference")
    if isinstance(desc, dict) and "beta" in desc:
        return thermal_state(spec.H_B, float(desc["beta"]))
    return decode_matrix(desc["matrix"] if isinstance(desc, dict) else desc)


def _fit(T: np.ndarray, S: np.ndarray) -> dict:
    a, b = np.polyfit(T, S, 1)
    resid = S - (a * T + b)
    span = float(S.max() - S.min())
    return {
        "slope": float(a), "intercept": float(b), "range": span,
        "max_residual_fraction": float(np.abs(resid).max() / span) if span > 0 else None,
        "rms_residual_fraction": float(np.sqrt(np.mean(resid ** 2)) / span) if span > 0 else None,
    }


def secular_curve(spec: ModelSpec, reference: np.ndarray, m: int, T_grid, secular_only: bool = False):
    """S(T) = ||int_0^T Q' exp((L_0 + i omega_m) t) dt Pi_0||_F, with Q' built on ``reference``.

    L_0 is diagonal in the product eigenbasis, so the time integral is
    evaluated in closed form.  ``secular_only`` keeps only the zero modes of
    L_0 + i omega_m, the part that grows like T.
    """
    bohr = bohr_decomposition(spec.H_S)
    right = EigenFrame(spec, build_projectors(spec), bohr)
    wrong = EigenFrame(spec, build_projectors(spec, reference), bohr)
    Pi0 = frame_dense(right)["P"]
    Qw = frame_dense(wrong)["Q"]
    kappa = (bohr.omegas[m] - right.nu).ravel()
    zero = np.abs(kappa) <= 1e-9 * max(np.abs(right.nu).max(), 1.0)
    safe = np.where(zero, 1.0, kappa)
    out = []
    for T in np.asarray(T_grid, dtype=float):
        f = np.where(zero, T, 0.0 if secular_only else (np.exp(1j * kappa * T) - 1.0) / (1j * safe))
        out.append(float(np.linalg.norm(Qw @ (f[:, None] * Pi0))))
    return np.array(out), float(np.linalg.norm(Pi0))


def secular_demo(cfg: StudyConfig, spec: ModelSpec | None = None) -> dict:
    """Linear growth of the point-spectrum term under a wrong reference state."""
    spec = build_model(cfg.model) if spec is None else spec
    ref = _wrong_reference(spec, cfg.wrong_reference)
    build_projectors(spec, ref)                 # stationarity of the wrong reference
    points = int(cfg.secular.get("points", 41))
    if points < 4:
        raise ValueError(f"a linear fit needs at least 4 T points, got {points}")
    if spec.window is None:
        raise ValueError("secular demo needs a finite bath window")
    frac = float(cfg.secular.get("fraction", 0.4))
    T = np.linspace(0.0, frac * spec.window.t_rec, points)
    spec.check_time(float(T[-1]), "secular T grid end")
    bohr = bohr_decomposition(spec.H_S)
    m = bohr.most_degenerate()
    S_right, norm = secular_curve(spec, spec.omega_B, m, T)
    S_wrong, _ = secular_curve(spec, ref, m, T)
    S_block, _ = secular_curve(spec, ref, m, T, secular_only=True)
    right, wrong, block = _fit(T, S_right), _fit(T, S_wrong), _fit(T, S_block)
    right_ok = abs(right["slope"]) <= 1e-6 * norm
    wrong_ok = wrong["slope"] > 0 and wrong["max_residual_fraction"] is not None \
        and wrong["max_residual_fraction"] < 0.01
    return {
        "m": m, "omega_m": float(bohr.omegas[m]), "operand_norm": norm,
        "T": T.tolist(), "S_correct": S_right.tolist(), "S_wrong": S_wrong.tolist(),
        "fit_correct": right, "fit_wrong": wrong, "fit_wrong_secular_block": block,
        "criteria": {
            "correct_slope_bounded": {"passed": bool(right_ok), "relative_slope": abs(right["slope"]) / norm},
            "wrong_slope_linear": {"passed": bool(wrong_ok), "slope": wrong["slope"],
                                   "max_residual_fraction": wrong["max_residual_fraction"]},
        },
        "passed": bool(right_ok and wrong_ok),
    }


def factorization_decay(cfg: StudyConfig, spec: ModelSpec | None = None,
                        taus=(0.0, 0.5, 1.0)) -> dict:
    """||Q rho(tau / lambda^2)|| (and its local-observable counterpart) per coupling."""
    spec = build_model(cfg.model) if spec is None else spec
    taus = np.asarray(taus, dtype=float)
    StudyConfig(cfg.model, cfg.lambdas, taus).validate(spec)
    pair = build_projectors(spec)
    rho0 = build_correlated_state(spec, build_recipe(spec, cfg.recipe, cfg.seed))
    panel = local_panel(spec) if spec.name == "friedrichs" else []
    lams = sorted(cfg.lambdas, reverse=True)
    table, local = {}, {}
    for lam in lams:
        states = propagate_exact(spec.with_coupling(lam), rho0, taus / lam ** 2).states
        table[f"{lam:g}"] = [float(np.linalg.norm(pair.Q(r))) for r in states]
        local[f"{lam:g}"] = [_q_local(pair, panel, r) for r in states]
    crit = {}
    for j, tau in enumerate(taus):
        col = [table[f"{lam:g}"][j] for lam in lams]
        if tau > 0:
            crit[f"q_norm_decreasing_tau={tau:g}"] = {"passed": _strictly_decreasing(col), "values": col}
        else:
            crit["q_norm_tau0_constant"] = {"passed": bool(np.ptp(col) <= 1e-12), "spread": float(np.ptp(col))}
    return {"lambdas": lams, "taus": taus.tolist(), "q_norm": table, "q_local": local,
            "criteria": crit, "passed": all(c["passed"] for c in crit.values())}


# ---------------------------------------------------------------------------
# built-in checks

def builtin_check(seed: int = 0) -> dict:
    sb = build_spin_bath_model(3, 1.0)
    algebra = verify_projector_algebra(build_projectors(sb), sb, probes=20, seed=seed)
    small = build_small_model(0.3)
    pair, bohr = build_projectors(small), bohr_decomposition(small.H_S)
    rho0 = build_correlated_state(small, build_recipe(small, {"kind": "controlled"}, seed))
    lam = 0.3
    taus = lam ** 2 * np.linspace(0.0, 10.0, 21)
    ex = nz_exactness(pair, small, bohr, rho0, taus, lam, 0.01)
    nz_ok = ex["max_trace_distance"] <= 1e-5
    return {
        "projector_algebra": algebra,
        "nz_exactness": {"max_trace_distance": ex["max_trace_distance"], "tolerance": 1e-5,
                         "passed": bool(nz_ok)},
        "passed": bool(algebra["passed"] and nz_ok),
    }


# ---------------------------------------------------------------------------
# CLI

def _model_from_args(args) -> ModelSpec:
    params = {}
    if args.model == "friedrichs":
        params = {"N": args.N or 40}
        if args.g is not None:
            params["g"] = args.g
        if args.band is not None:
            params["band"] = args.band
        if args.omega0 is not None:
            params["omega0"] = args.omega0
        if args.jitter:
            params.update(jitter=args.jitter, seed=args.seed or 0)
    elif args.model == "spin_bath":
        params = {"N": args.N or 3, "beta": 1.0 if args.beta is None else args.beta}
    elif args.model == "small":
        params = {"seed": 7 if args.seed is None else args.seed}
    spec = build_model({"builder": args.model, "params": params})
    if args.lam is not None:
        spec = spec.with_coupling(args.lam)
    return spec


def _config(args, required: bool) -> StudyConfig | None:
    if args.config is None:
        if required:
            raise _UsageError(f"'{args.command}' requires --config PATH")
        return None
    cfg = StudyConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.eta is not None:
        cfg.eta = args.eta
    if args.dt is not None:
        cfg.dt = args.dt
    return cfg


class _UsageError(Exception):
    pass


def _emit(args, name: str, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not serializable: {type(obj)}")


def _cmd_check(args) -> int:
    rep = builtin_check(args.seed or 0)
    _emit(args, "check.json", rep)
    return EXIT_PASS if rep["passed"] else EXIT_FAIL


def _cmd_simulate(args) -> int:
    spec = _model_from_args(args)
    rho0 = build_correlated_state(spec, build_recipe(spec, None, args.seed or 0))
    times = np.linspace(0.0, args.t_max, args.points)
    traj = propagate_exact(spec, rho0, times)
    reduced = [partial_trace_bath(r, spec.dimS, spec.dimB) for r in traj.states]
    _emit(args, "trajectory.json", {
        "model": spec.name, "lambda": spec.lam, "times": times,
        "reduced_states": [encode_matrix(r) for r in reduced],
        "populations": [np.real(np.diag(r)).tolist() for r in reduced],
    })
    return EXIT_PASS


def _cmd_kernel(args) -> int:
    spec = _model_from_args(args) if args.model != "friedrichs" else build_small_model()
    lam = args.lam if args.lam is not None else spec.lam
    pair, bohr = build_projectors(spec), bohr_decomposition(spec.H_S)
    rho0 = build_correlated_state(spec, build_recipe(spec, {"kind": "controlled"}, args.seed or 0))
    dS = spec.dimS
    kern = {}
    for m in range(len(bohr)):
        for n in range(len(bohr)):
            K = memory_kernel(pair, spec, bohr, m, n, args.tau, lam).dense()
            red = np.zeros((dS * dS, dS * dS), dtype=complex)
            for k in range(dS * dS):
                E = np.zeros(dS * dS, dtype=complex)
                E[k] = 1
                X = (K @ pair.lift(E.reshape(dS, dS)).ravel()).reshape(spec.D, spec.D)
                red[:, k] = pair.reduce(X).ravel()
            kern[f"{m},{n}"] = encode_matrix(red)
    R_norms = [float(np.linalg.norm(R_operator(pair, spec, bohr, m, args.tau, lam).dense(), 2))
               for m in range(len(bohr))]
    I = correlation_series(pair, spec, bohr, rho0, [args.tau], lam)[0]
    rec = verify_recurrence(pair, spec, bohr, 0, args.tau, lam)
    _emit(args, "kernel.json", {
        "model": spec.name, "lambda": lam, "tau": args.tau, "omegas": bohr.omegas,
        "R_norms": R_norms, "K_reduced": kern, "I_reduced": encode_matrix(pair.reduce(I)),
        "recurrence": rec,
    })
    return EXIT_PASS


def _cmd_generator(args) -> int:
    spec = _model_from_args(args)
    eta = args.eta if args.eta is not None else default_eta(spec)
    gen = vanhove_generator(build_projectors(spec), spec, bohr_decomposition(spec.H_S), eta)
    doc = gen.to_dict()
    doc["rates"] = generator_rates(gen).tolist()
    doc["decay_rate_excited"] = decay_rate(gen)
    _emit(args, "generator.json", doc)
    return EXIT_PASS


def mixing_report(spec: ModelSpec, seed: int = 0, points: int = 801) -> dict:
    t = np.linspace(0.0, spec.window.usable, points)
    rho0 = build_correlated_state(spec, build_recipe(spec, None, seed))
    if spec.name == "friedrichs":
        X = friedrichs_field_operators(spec)["X"]
        panel = local_panel(spec)
    else:
        X = partial_trace_bath(spec.H_SB @ np.kron(SIGMA_X, np.eye(spec.dimB)), spec.dimS, spec.dimB)
        X = 0.5 * (X + X.conj().T)
        panel = [spec.H_SB]
    C = bath_autocorrelation(spec, X, X, t)
    t_dec = decay_time(C, t)
    free = free_factorization_check(spec, rho0, panel, t)
    relax = relaxation_check(spec, rho0, panel, t)
    spectrum = bath_spectrum_report(spec)
    auto_ok = t_dec is not None and t_dec < spec.window.usable
    for r in (free, relax):
        r.pop("deviation")
        r.pop("times")
    return {
        "autocorrelation": {"decay_time": t_dec, "C0": abs(C[0]), "threshold": 0.05,
                            "usable_window": spec.window.usable, "passed": bool(auto_ok)},
        "free_factorization": free, "relaxation": relax, "spectrum": spectrum,
        "passed": bool(auto_ok and free["passed"]),
    }


def _cmd_mixing(args) -> int:
    spec = _model_from_args(args)
    rep = mixing_report(spec, args.seed or 0)
    _emit(args, "mixing.json", rep)
    return EXIT_PASS if rep["passed"] else EXIT_FAIL


def _cmd_study(args) -> int:
    cfg = _config(args, required=True)
    res = scaling_study(cfg)
    outdir = args.output or cfg.output
    if outdir:
        res.write(outdir)
    else:
        sys.stdout.write(res.csv_text())
    return EXIT_PASS if res.to_report()["passed"] else EXIT_FAIL


def _cmd_secular(args) -> int:
    cfg = _config(args, required=False)
    if cfg is None:
        cfg = StudyConfig.from_dict({"model": {"builder": "spin_bath", "params": {"N": 3, "beta": 1.0}},
                                     "wrong_reference": {"beta": 0.0}})
    rep = secular_demo(cfg)
    _emit(args, "secular.json", rep)
    return EXIT_PASS if rep["passed"] else EXIT_FAIL


def _cmd_factorize(args) -> int:
    cfg = _config(args, required=True)
    rep = factorization_decay(cfg)
    _emit(args, "factorize.json", rep)
    return EXIT_PASS if rep["passed"] else EXIT_FAIL


COMMANDS = {
    "check": (_cmd_check, "projector algebra and NZ exactness on built-in models"),
    "simulate": (_cmd_simulate, "exact trajectory dump"),
    "kernel": (_cmd_kernel, "R, K and I evaluation dump (dense small model)"),
    "generator": (_cmd_generator, "van Hove generator export"),
    "mixing": (_cmd_mixing, "mixing diagnostics"),
    "study": (_cmd_study, "scaling study (needs --config)"),
    "secular": (_cmd_secular, "wrong-projector secular demonstration"),
    "factorize": (_cmd_factorize, "factorization decay (needs --config)"),
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="StudyConfig JSON")
    common.add_argument("--output", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--eta", type=float, help="resolvent regularization")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--model", choices=("friedrichs", "spin_bath", "small"), default="friedrichs")
    common.add_argument("--N", type=int, help="bath size")
    common.add_argument("--beta", type=float, help="spin-bath inverse temperature")
    common.add_argument("--lam", type=float, help="coupling")
    common.add_argument("--g", type=float, help="Friedrichs flat coupling")
    common.add_argument("--band", type=float, nargs=2, metavar=("WMIN", "WMAX"))
    common.add_argument("--omega0", type=float)
    common.add_argument("--jitter", type=float, default=0.0)
    common.add_argument("--tau", type=float, default=1.0, help="scaled time for 'kernel'")
    common.add_argument("--t-max", type=float, default=50.0, help="end time for 'simulate'")
    common.add_argument("--points", type=int, default=101, help="time points for 'simulate'")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="nzlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def run_cli(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command][0](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, WindowError, DimensionError, ValueError, KeyError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli())
