"""Operational diagnostics for the mixing property of a finite bath.

A finite bath is never mixing; it only behaves like one for times short
compared with its recurrence time.  Every routine here refuses time grids
that leave the usable window of the model, the same window the propagators
in :mod:`nzlab.nz` enforce.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .core import Eigensystem, as_operator, partial_trace_bath
from .model import ModelSpec

TAIL_FRACTION = 0.25


def _grid(spec: ModelSpec, t_grid) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if t.size and t.min() < 0:
        raise ValueError("times must be non-negative")
    if t.size:
        spec.check_time(float(t.max()), "time grid end")
    return t


def bath_autocorrelation(spec: ModelSpec, X: np.ndarray, Y: np.ndarray, t_grid) -> np.ndarray:
    """C(t) = tr{X(t) Y Omega_B} - tr{X Omega_B} tr{Y Omega_B}, X(t) = e^{iH_B t} X e^{-iH_B t}."""
    t = _grid(spec, t_grid)
    X, Y = as_operator(X), as_operator(Y)
    if X.shape[0] != spec.dimB or Y.shape[0] != spec.dimB:
        raise ValueError(f"X and Y must act on the bath (dimension {spec.dimB})")
    eig = Eigensystem(spec.H_B)
    om = spec.omega_B
    mean = np.trace(X @ om) * np.trace(Y @ om)
    YO = Y @ om
    # tr{X(t) Y Omega} = sum_ab X_ab (Y Omega)_ba e^{i(E_a - E_b) t} in the eigenbasis
    Xe = eig.to_eigenbasis(X)
    Ze = eig.to_eigenbasis(YO).T
    nu = eig.bohr_matrix()
    weights = (Xe * Ze).ravel()
    return np.array([np.sum(weights * np.exp(1j * nu.ravel() * s)) for s in t]) - mean


def decay_time(values: np.ndarray, t_grid, threshold: float = 0.05) -> float | None:
    """Earliest grid time after which |values| stays below threshold * |values[0]|."""
    v = np.abs(np.asarray(values))
    t = np.asarray(t_grid, dtype=float)
    ref = v[0]
    if ref == 0:
        return float(t[0])
    above = np.nonzero(v >= threshold * ref)[0]
    if above.size == 0:
        return float(t[0])
    last = above[-1]
    return None if last == v.size - 1 else float(t[last + 1])


def _deviation_report(dev: np.ndarray, t: np.ndarray, threshold: float) -> dict:
    n_tail = max(int(np.ceil(TAIL_FRACTION * t.size)), 1)
    initial = float(dev[:, 0].max()) if dev.size else 0.0
    tail = float(dev[:, -n_tail:].max()) if dev.size else 0.0
    passed = bool(tail <= threshold * initial) if initial > 0 else bool(tail == 0.0)
    return {
        "times": t.tolist(),
        "deviation": dev.tolist(),
        "initial_deviation": initial,
        "tail_deviation": tail,
        "tail_start": float(t[-n_tail]) if t.size else None,
        "threshold": threshold,
        "passed": passed,
    }


def relaxation_check(spec: ModelSpec, rho0: np.ndarray, observables, t_grid,
                     threshold: float = 0.05) -> dict:
    """Weak relaxation of e^{L_B t} rho0 onto tr_B{rho0} x Omega_B, per observable.

    Passes when the largest deviation over the last quarter of the grid is
    below ``threshold`` times the largest deviation at t = 0.
    """
    t = _grid(spec, t_grid)
    rho0 = as_operator(rho0)
    target = np.kron(partial_trace_bath(rho0, spec.dimS, spec.dimB), spec.omega_B)
    eig = Eigensystem(np.kron(np.eye(spec.dimS), spec.H_B))
    return _deviation_report(_deviations(eig, rho0, observables, t, lambda s: target), t, threshold)


def free_factorization_check(spec: ModelSpec, rho0: np.ndarray, observables, t_grid,
                             threshold: float = 0.05) -> dict:
    """Compare e^{L_0 t} rho0 with e^{L_S t}(tr_B{rho0} x Omega_B) through the observables."""
    t = _grid(spec, t_grid)
    rho0 = as_operator(rho0)
    rhoS = partial_trace_bath(rho0, spec.dimS, spec.dimB)
    sys = Eigensystem(spec.H_S)
    eig = Eigensystem(spec.H0())
    return _deviation_report(
        _deviations(eig, rho0, observables, t, lambda s: np.kron(sys.conjugate(rhoS, s), spec.omega_B)),
        t, threshold)


def _deviations(eig: Eigensystem, rho0, observables, t, target) -> np.ndarray:
    obs = [as_operator(D) for D in observables]
    out = np.zeros((len(obs), t.size))
    for j, s in enumerate(t):
        rho = eig.conjugate(rho0, s)
        ref = target(s)
        for i, D in enumerate(obs):
            out[i, j] = abs(np.trace(D @ (rho - ref)))
    return out


def bath_spectrum_report(spec: ModelSpec, tol: float | None = None) -> dict:
    """Eigenvalues of i L_B (Bohr frequencies of H_B) with multiplicities.

    A nondegenerate H_B has kernel dimension dimB and every nonzero
    frequency E_a - E_b appears once; larger multiplicities are flagged.
    """
    E = np.linalg.eigvalsh(spec.H_B)
    if tol is None:
        tol = 1e-9 * max(np.abs(E).max(), 1.0)
    diffs = (E[:, None] - E[None, :]).ravel()
    keys = np.round(diffs / tol).astype(np.int64)
    counts = Counter(keys.tolist())
    kernel = counts.get(0, 0)
    levels = np.unique(np.round(E / tol).astype(np.int64))
    nonzero = sorted(k for k in counts if k != 0)
    degenerate = {float(k * tol): c for k, c in counts.items() if k != 0 and c > 1}
    gaps = np.diff(levels) * tol
    return {
        "dimB": spec.dimB,
        "frequencies": [float(k * tol) for k in nonzero],
        "multiplicities": [counts[k] for k in nonzero],
        "kernel_dimension": kernel,
        "distinct_levels": int(levels.size),
        "min_level_gap": float(gaps.min()) if gaps.size else None,
        "max_multiplicity": max((counts[k] for k in nonzero), default=0),
        "degenerate_count": len(degenerate),
        "degenerate_flag": bool(degenerate),
        "t_rec": None if spec.window is None else spec.window.t_rec,
    }


def friedrichs_field_operators(spec: ModelSpec) -> dict[str, np.ndarray]:
    """Local bath observables of the Friedrichs bath: the field quadratures of the
    mode the atom couples to, and that mode's occupation."""
    g = np.asarray(spec.meta["couplings"], dtype=complex)
    c = np.zeros(spec.dimB, dtype=complex)
    norm = np.linalg.norm(g)
    # uncoupled bath: fall back to the flat mode
    c[1:] = g / norm if norm > 0 else 1 / np.sqrt(g.size)
    low = np.zeros((spec.dimB, spec.dimB), dtype=complex)
    low[0] = c
    return {
        "X": low + low.conj().T,
        "Y": -1j * (low - low.conj().T),
        "N": np.outer(c, c.conj()),
    }


def local_panel(spec: ModelSpec, bath_ops=None) -> list[np.ndarray]:
    """Observables A x X with A ranging over 1 and the Pauli matrices."""
    if bath_ops is None:
        bath_ops = list(friedrichs_field_operators(spec).values())
    paulis = [np.eye(spec.dimS)]
    if spec.dimS == 2:
        from .model import SIGMA_X, SIGMA_Y, SIGMA_Z
        paulis += [SIGMA_X, SIGMA_Y, SIGMA_Z]
    return [np.kron(A, X) for A in paulis for X in bath_ops]
