"""Exact and projected dynamics, the key operator R_m, memory kernels, the
initial-correlation term, the NZ integro-differential solver and the van Hove
Markov generator.

Coupling-dependent routines take the coupling ``lam`` explicitly and evaluate
the model at that coupling; ``L_SB`` never includes the coupling constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .core import (
    MAX_DENSE_DIM,
    DimensionError,
    Eigensystem,
    ValidationError,
    as_operator,
    require_density,
    trace_distance,
)
from .frame import EigenFrame
from .liouville import BohrDecomposition, ProjectorPair, Superoperator, bohr_decomposition, build_projectors
from .model import ModelSpec

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    """Step-size instability detected while stepping the NZ equation."""


class ConditioningError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.states)

    def traces(self) -> np.ndarray:
        return np.array([np.trace(s).real for s in self.states])


def default_dt(spec: ModelSpec) -> float:
    """0.05 / ||H|| for the total Hamiltonian at the model's coupling."""
    return 0.05 / max(np.linalg.norm(spec.H_total(), 2), 1e-12)


def _grid_steps(T: float, dt: float) -> tuple[int, float]:
    n = max(int(np.ceil(T / dt - 1e-9)), 1)
    return n, T / n


def _setup(spec: ModelSpec, lam: float, pair=None, bohr=None):
    s = spec.with_coupling(lam)
    pair = build_projectors(s) if pair is None else pair
    bohr = bohr_decomposition(s.H_S) if bohr is None else bohr
    return s, pair, bohr


# ---------------------------------------------------------------------------
# exact and projected propagation

def propagate_exact(spec: ModelSpec, rho0: np.ndarray, times) -> Trajectory:
    """rho(t) = exp(-iHt) rho0 exp(iHt) with H = H_S + H_B + lam H_SB."""
    rho0 = require_density(rho0, "rho0", spec.tolerances.herm_tol)
    if rho0.shape[0] != spec.D:
        raise DimensionError(f"rho0 has dimension {rho0.shape[0]}, expected {spec.D}")
    eig = Eigensystem(spec.H_total())
    times = np.atleast_1d(np.asarray(times, dtype=float))
    states = [rho0.copy() if t == 0 else eig.conjugate(rho0, t) for t in times]
    return Trajectory(times, states, {"kind": "exact"})


def liouvillian_dense(spec: ModelSpec, pair: ProjectorPair) -> dict[str, np.ndarray]:
    """Dense L_0, L_SB, P, Q, L_0' (row-major vectorization) for small models."""
    if spec.D > MAX_DENSE_DIM:
        raise DimensionError(f"dense superoperators need D <= {MAX_DENSE_DIM}, got {spec.D}")
    from .liouville import liouvillian_matrix
    L0 = liouvillian_matrix(spec.H0())
    LSB = liouvillian_matrix(spec.H_SB)
    P = pair.P_op.dense()
    Q = np.eye(spec.D ** 2) - P
    return {"L0": L0, "LSB": LSB, "P": P, "Q": Q, "L0p": L0 + spec.lam * Q @ LSB @ Q}


def propagate_Q_projected(pair: ProjectorPair, spec: ModelSpec, X0: np.ndarray, t: float,
                          dt: float | None = None, method: str = "rk4") -> np.ndarray:
    """exp(L_0' t) X0 for a Q-ranged X0, with L_0' = L_0 + lam Q L_SB Q.

    ``method``: ``"rk4"`` steps the interaction-picture equation,
    ``"expm"`` exponentiates the dense generator, and ``"conjugation"``
    evaluates Q exp(Lt) Q, which coincides with the projected propagator
    only when the coupling vanishes (rejected otherwise).
    """
    X0 = as_operator(X0)
    scale = max(np.linalg.norm(X0), 1.0)
    if np.linalg.norm(pair.P(X0)) > 1e-10 * scale:
        raise PreconditionError("X0 is not in the range of Q")
    if t == 0:
        return X0.copy()
    if method == "conjugation":
        if spec.lam != 0:
            raise PreconditionError("Q exp(Lt) Q equals exp(L_0' t) on Q-range only at zero coupling")
        return pair.Q(Eigensystem(spec.H_total()).conjugate(X0, t))
    if method == "expm":
        M = liouvillian_dense(spec, pair)["L0p"]
        return (expm(M * t) @ X0.ravel()).reshape(X0.shape)
    if method != "rk4":
        raise ValueError(f"unknown method {method!r}")
    frame = EigenFrame(spec, pair, bohr_decomposition(spec.H_S))
    n, h = _grid_steps(t, dt or default_dt(spec))
    for _, _, Y, _ in frame.walk(frame.to_frame(X0), h, n):
        pass
    return frame.from_frame(Y)


# ---------------------------------------------------------------------------
# the key operator R_m and its consumers

def _check_window(spec: ModelSpec, tau: float, lam: float, guard: bool) -> float:
    if lam <= 0:
        raise ValueError(f"coupling must be positive, got {lam}")
    T = tau / lam ** 2
    if guard:
        spec.check_time(T, f"tau/lambda^2 for lambda={lam:g}")
    return T


def _van_loan_integral(M: np.ndarray, T: float) -> np.ndarray:
    """int_0^T exp(M s) ds via the augmented-matrix exponential."""
    n = M.shape[0]
    big = np.zeros((2 * n, 2 * n), dtype=complex)
    big[:n, :n] = M
    big[:n, n:] = np.eye(n)
    return expm(big * T)[:n, n:]


def R_operator(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, m: int,
               tau: float, lam: float, dt: float | None = None, method: str = "expm",
               guard: bool = True) -> Superoperator:
    """R_m(tau) = int_0^{tau/lam^2} Q exp((L_0' + i omega_m) t) dt as a dense superoperator.

    ``method="expm"`` integrates exactly through an augmented exponential;
    ``method="trapezoid"`` applies the composite trapezoid rule with step ``dt``.
    """
    T = _check_window(spec, tau, lam, guard)
    s = spec.with_coupling(lam)
    ops = liouvillian_dense(s, pair)
    n2 = s.D ** 2
    if T == 0:
        return Superoperator(s.D, matrix=np.zeros((n2, n2), dtype=complex))
    M = ops["L0p"] + 1j * bohr.omegas[m] * np.eye(n2)
    if method == "expm":
        R = ops["Q"] @ _van_loan_integral(M, T)
    elif method == "trapezoid":
        nsteps, h = _grid_steps(T, dt or default_dt(s))
        E = expm(M * h)
        cur = np.eye(n2, dtype=complex)
        acc = 0.5 * cur
        for _ in range(nsteps - 1):
            cur = E @ cur
            acc += cur
        acc += 0.5 * (E @ cur)
        R = ops["Q"] @ (h * acc)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Superoperator(s.D, matrix=R, label=f"R{m}")


def R_apply(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, X: np.ndarray,
            tau_grid, lam: float, dt: float | None = None, guard: bool = True) -> np.ndarray:
    """Matrix-free R_m(tau) Q X for every Bohr index m and every tau in ``tau_grid``.

    Returns an array of shape ``(len(tau_grid), len(bohr), D, D)`` in the
    original basis.  Works for any model under the matrix-free cap.
    """
    s, pair, bohr = _setup(spec, lam, pair, bohr)
    taus = np.asarray(tau_grid, dtype=float)
    T = _check_window(s, float(taus.max()), lam, guard)
    frame = EigenFrame(s, pair, bohr)
    h = dt or default_dt(s)
    targets = taus / lam ** 2
    n_steps, h = _align(targets, h)
    want = {int(round(t / h)): i for i, t in enumerate(targets)}
    out = np.zeros((taus.size, len(bohr), s.D, s.D), dtype=complex)
    X0 = frame.Q(frame.to_frame(as_operator(X)))
    for n, _, _, S in frame.walk(X0, h, n_steps, bohr.omegas):
        if n in want:
            out[want[n]] = [frame.from_frame(frame.Q(S[k])) for k in range(len(bohr))]
    return out


def _align(targets: np.ndarray, h: float) -> tuple[int, float]:
    """Largest step <= h that puts every target time on the grid."""
    T = float(np.max(targets))
    if T == 0:
        return 0, h
    nonzero = targets[targets > 0]
    base = float(np.min(nonzero))
    ratios = nonzero / base
    if np.allclose(ratios, np.round(ratios), rtol=0, atol=1e-9):
        per = max(int(np.ceil(base / h - 1e-9)), 1)
        step = base / per
        return int(round(T / step)), step
    n = max(int(np.ceil(T / h - 1e-9)), 1)
    step = T / n
    if not np.allclose(targets / step, np.round(targets / step), atol=1e-6):
        raise ValueError("requested times are not commensurate with a uniform grid")
    return n, step


def memory_kernel(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, m: int, n: int,
                  tau: float, lam: float, method: str = "expm", guard: bool = True) -> Superoperator:
    """K_mn(tau) = P Qt_m L_SB R_m(tau) L_SB Qt_n P (dense, small models)."""
    s = spec.with_coupling(lam)
    R = R_operator(pair, s, bohr, m, tau, lam, method=method, guard=guard).dense()
    ops = liouvillian_dense(s, pair)
    Qm = bohr.superoperator(m, s.dimB).dense()
    Qn = bohr.superoperator(n, s.dimB).dense()
    P, LSB = ops["P"], ops["LSB"]
    return Superoperator(s.D, matrix=P @ Qm @ LSB @ R @ LSB @ Qn @ P, label=f"K{m}{n}")


def reduced_memory_kernel(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition,
                          tau_grid, lam: float, dt: float | None = None,
                          guard: bool = True) -> np.ndarray:
    """Matrix-free K_mn(tau) restricted to the P-range, as dimS^2 x dimS^2 matrices.

    Shape ``(len(tau_grid), M, M, dimS^2, dimS^2)`` acting on row-major
    system operators X_S (the P-range element X_S x Omega_B).
    """
    s, pair, bohr = _setup(spec, lam, pair, bohr)
    dS = s.dimS
    R = np.stack([R_apply(pair, s, bohr, _kernel_input(s, pair, bohr, n, k), tau_grid, lam, dt, guard)
                  for n in range(len(bohr)) for k in range(dS * dS)])
    nb = len(bohr)
    R = R.reshape(nb, dS * dS, len(tau_grid), nb, s.D, s.D)
    LSB = lambda X: -1j * (s.H_SB @ X - X @ s.H_SB)
    out = np.zeros((len(tau_grid), nb, nb, dS * dS, dS * dS), dtype=complex)
    for n in range(nb):
        for k in range(dS * dS):
            for it in range(len(tau_grid)):
                for m in range(nb):
                    Z = bohr.project(m, LSB(R[n, k, it, m]), s.dimB)
                    out[it, m, n, :, k] = pair.reduce(Z).ravel()
    return out


def _kernel_input(spec, pair, bohr, n, k):
    E = np.zeros(spec.dimS ** 2, dtype=complex)
    E[k] = 1.0
    X = pair.lift(E.reshape(spec.dimS, spec.dimS))
    X = bohr.project(n, X, spec.dimB)
    return -1j * (spec.H_SB @ X - X @ spec.H_SB)


def correlation_series(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition,
                       rho0: np.ndarray, tau_grid, lam: float, dt: float | None = None,
                       guard: bool = True) -> list[np.ndarray]:
    """I(tau) = lam sum_m P Qt_m L_SB R_m(tau) Q rho0 for every tau in the grid.

    Each entry is a full-space, P-ranged operator.
    """
    s, pair, bohr = _setup(spec, lam, pair, bohr)
    taus = np.asarray(tau_grid, dtype=float)
    Qrho = pair.Q(as_operator(rho0))
    if np.linalg.norm(Qrho) == 0 or np.all(taus == 0):
        return [np.zeros((s.D, s.D), dtype=complex) for _ in taus]
    R = R_apply(pair, s, bohr, Qrho, taus, lam, dt, guard)
    out = []
    for it in range(taus.size):
        acc = np.zeros((s.D, s.D), dtype=complex)
        for m in range(len(bohr)):
            Y = R[it, m]
            acc += bohr.project(m, -1j * (s.H_SB @ Y - Y @ s.H_SB), s.dimB)
        out.append(lam * pair.P(acc))
    return out


def correlation_term(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition,
                     rho0: np.ndarray, tau: float, lam: float, dt: float | None = None,
                     guard: bool = True) -> np.ndarray:
    return correlation_series(pair, spec, bohr, rho0, [tau], lam, dt, guard)[0]


# ---------------------------------------------------------------------------
# NZ integro-differential equation

def _nz_pass(frame: EigenFrame, rho0_frame: np.ndarray, h: float, n_steps: int,
             with_correlation: bool = True) -> np.ndarray:
    """One trapezoid pass of the NZ equation on the grid t_n = n h.

    Returns rho_I(t_n) as system operators in the frame basis, shape
    ``(n_steps + 1, dimS, dimS)``.
    """
    dS = frame.dimS
    d2 = dS * dS
    lam = frame.lam
    omegas = frame.omegas
    nb = omegas.size
    basis = np.eye(d2, dtype=complex).reshape(d2, dS, dS)
    inputs = frame.Q(frame.LSB(frame.lift(basis)))
    kern = np.zeros((nb, n_steps + 1, d2, d2), dtype=complex)
    for n, t, Y, _ in frame.walk(inputs, h, n_steps):
        Z = frame.trB(frame.LSB(Y))                     # (d2 inputs, dS, dS)
        for m in range(nb):
            col = np.exp(1j * omegas[m] * t) * (Z * frame.masks[m])
            kern[m, n] = col.reshape(d2, d2).T
    g = np.zeros((n_steps + 1, d2), dtype=complex)
    Qrho = frame.Q(rho0_frame)
    if with_correlation and np.linalg.norm(Qrho) > 0:
        for n, t, Y, _ in frame.walk(Qrho, h, n_steps):
            Z = frame.trB(frame.LSB(Y))
            g[n] = lam * (np.exp(1j * frame.nu_S * t) * Z).ravel()

    t_grid = h * np.arange(n_steps + 1)
    sys_phase = np.exp(-1j * frame.nu_S.ravel()[None, :] * t_grid[:, None])   # exp(L_S t)
    bohr_phase = np.exp(1j * omegas[:, None] * t_grid[None, :])               # (nb, n+1)
    y = np.zeros((n_steps + 1, d2), dtype=complex)
    y[0] = frame.trB(rho0_frame).ravel()
    u = np.zeros((nb, n_steps + 1, d2), dtype=complex)   # exp(i w_m t') rho_S(t')

    def set_u(j):
        rs = sys_phase[j] * y[j]
        u[:, j] = bohr_phase[:, j, None] * rs

    set_u(0)
    lam2 = lam * lam
    f_prev = g[0].copy()
    k0 = kern[:, 0]
    for n in range(n_steps):
        j = n + 1
        if j > 1:
            hist = np.einsum("mjab,mjb->a", kern[:, j - 1:0:-1], u[:, 1:j]) * h
        else:
            hist = np.zeros(d2, dtype=complex)
        hist += 0.5 * h * np.einsum("mab,mb->a", kern[:, j], u[:, 0])
        # implicit end point: 0.5 h sum_m k_m(0) exp(i w_m t_j) exp(L_S t_j) y_j
        A = 0.5 * h * np.einsum("mab,m->ab", k0, bohr_phase[:, j]) * sys_phase[j][None, :]
        rhs = y[n] + 0.5 * h * (f_prev + g[j] + lam2 * hist)
        lhs = np.eye(d2) - 0.5 * h * lam2 * A
        y[j] = np.linalg.solve(lhs, rhs)
        set_u(j)
        f_prev = g[j] + lam2 * (hist + A @ y[j])
    return y.reshape(n_steps + 1, dS, dS)


def solve_nz(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, rho0: np.ndarray,
             tau_grid, lam: float, dt: float, guard: bool = True,
             with_correlation: bool = True, extrapolate: bool = True) -> Trajectory:
    """Integrate the exact NZ equation for rho_I(tau) = exp(-L_S tau/lam^2) P rho(tau/lam^2).

    The memory integral uses the trapezoid rule with the Bohr phases applied
    exactly, the time stepping is implicit trapezoidal, and two passes (dt and
    dt/2) are combined by Richardson extrapolation.  States are system
    operators (the P-range factor tr_B), in the original basis.
    """
    s, pair, bohr = _setup(spec, lam, pair, bohr)
    rho0 = require_density(rho0, "rho0", s.tolerances.herm_tol)
    taus = np.asarray(tau_grid, dtype=float)
    T = _check_window(s, float(taus.max()), lam, guard)
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"tau_grid end {T} is not a multiple of dt={dt}")
    idx = np.rint(taus / lam ** 2 / dt).astype(int)
    if np.any(np.abs(idx * dt - taus / lam ** 2) > 1e-8 * max(T, 1.0)):
        raise ValueError("tau_grid points must fall on the dt grid in t = tau / lam^2")
    frame = EigenFrame(s, pair, bohr)
    r0 = frame.to_frame(rho0)
    y = _nz_pass(frame, r0, dt, n_steps, with_correlation)
    if extrapolate:
        y2 = _nz_pass(frame, r0, 0.5 * dt, 2 * n_steps, with_correlation)[::2]
        y = (4.0 * y2 - y) / 3.0
    drift = np.max(np.abs(np.einsum("nii->n", y) - 1.0))
    if drift > 1e-4:
        raise IntegrationError(f"trace drift {drift:.2e} exceeds 1e-4; reduce dt")
    states = [frame.sys_from_frame(y[i]) for i in idx]
    return Trajectory(taus, states, {"kind": "nz", "lambda": lam, "dt": dt, "trace_drift": float(drift)})


def interaction_picture_exact(spec: ModelSpec, bohr: BohrDecomposition, rho0: np.ndarray,
                              tau_grid, lam: float) -> Trajectory:
    """exp(-L_S t) tr_B rho(t) at t = tau / lam^2, from exact propagation."""
    s = spec.with_coupling(lam)
    taus = np.asarray(tau_grid, dtype=float)
    traj = propagate_exact(s, rho0, taus / lam ** 2)
    from .core import partial_trace_bath
    states = [bohr.evolve(partial_trace_bath(r, s.dimS, s.dimB), -t)
              for r, t in zip(traj.states, traj.times)]
    return Trajectory(taus, states, {"kind": "exact-interaction", "lambda": lam})


def nz_exactness(pair, spec, bohr, rho0, tau_grid, lam, dt, **kw) -> dict:
    nz = solve_nz(pair, spec, bohr, rho0, tau_grid, lam, dt, **kw)
    ex = interaction_picture_exact(spec, bohr, rho0, tau_grid, lam)
    d = np.array([trace_distance(a, b) for a, b in zip(nz.states, ex.states)])
    return {"max_trace_distance": float(d.max()), "distances": d, "nz": nz, "exact": ex}


# ---------------------------------------------------------------------------
# van Hove generator

@dataclass
class MarkovGenerator:
    """K on system operators (row-major vectorization), with its per-block parts."""

    K: np.ndarray
    eta: float
    per_block: list
    dimS: int
    meta: dict = field(default_factory=dict)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (self.K @ np.asarray(X).ravel()).reshape(self.dimS, self.dimS)

    def to_dict(self) -> dict:
        from .model import encode_matrix
        return {"dimS": self.dimS, "eta": self.eta, "K": encode_matrix(self.K),
                "blocks": [{"omega": float(w), "K_mm": encode_matrix(k)} for w, k in self.per_block],
                "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str))}}


def _generator_blocks(frame: EigenFrame, resolvent) -> list[np.ndarray]:
    dS = frame.dimS
    d2 = dS * dS
    basis = np.eye(d2, dtype=complex).reshape(d2, dS, dS)
    blocks = []
    for m in range(frame.omegas.size):
        X = frame.lift(basis * frame.masks[m])
        W = frame.Q(frame.LSB(X))
        Y = frame.Q(resolvent(m, W))
        Z = frame.trB(frame.LSB(Y)) * frame.masks[m]
        blocks.append(-Z.reshape(d2, d2).T)
    return blocks


def vanhove_generator(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, eta: float,
                      check_route: bool = True, route_tol: float = 1e-6) -> MarkovGenerator:
    """K = -sum_m P Qt_m L_SB Q (L_0 + i omega_m - eta)^{-1} L_SB Qt_m P, reduced to system space.

    The resolvent is diagonal in the product eigenbasis.  With
    ``check_route`` the same blocks are rebuilt from the damped time integral
    int_0^inf exp(-eta t) Q exp((L_0 + i omega_m) t) dt by quadrature, and the
    two must agree to ``route_tol`` (relative).
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    s = spec.with_coupling(0.0)
    frame = EigenFrame(s, pair, bohr)
    scale = max(np.abs(frame.nu).max(), 1.0)
    for m, w in enumerate(bohr.omegas):
        gap = np.abs(frame.nu - w).min()
        if 1.0 / np.hypot(eta, gap) > 1e12 / scale:
            raise ConditioningError(f"resolvent at omega_m={w:g} is singular to working precision "
                                    f"(eta={eta:g}, nearest L_0 frequency gap {gap:.2e})")

    def resolvent(m, W):
        return W / (-1j * (frame.nu - bohr.omegas[m]) - eta)

    blocks = _generator_blocks(frame, resolvent)
    meta = {}
    if check_route:
        alt = _generator_blocks(frame, lambda m, W: -_damped_integral(frame, bohr.omegas[m], eta, W))
        err = max(np.abs(a - b).max() for a, b in zip(blocks, alt))
        ref = max(np.abs(a).max() for a in blocks) or 1.0
        meta["route_discrepancy"] = float(err / ref)
        if err > route_tol * ref:
            raise ConditioningError(f"resolvent and damped-integral routes disagree by {err / ref:.2e}")
    K = sum(blocks)
    K = frame.sys_super_from_frame(K)
    per_block = [(float(w), frame.sys_super_from_frame(b)) for w, b in zip(bohr.omegas, blocks)]
    return MarkovGenerator(K, eta, per_block, s.dimS, meta)


def _damped_integral(frame: EigenFrame, omega: float, eta: float, W: np.ndarray,
                     rel_tol: float = 1e-13) -> np.ndarray:
    """int_0^inf exp(-eta t) exp((L_0 + i omega) t) W dt by composite Simpson quadrature."""
    kappa = omega - frame.nu
    kmax = max(np.abs(kappa).max(), eta)
    t_max = -np.log(rel_tol) / eta
    h = 0.05 / kmax
    n = int(np.ceil(t_max / h))
    n += n % 2
    h = t_max / n
    rate = 1j * kappa - eta
    step = np.exp(rate * h)
    cur = np.ones_like(rate)
    acc = np.zeros_like(rate)
    for j in range(n + 1):
        c = 1.0 if j in (0, n) else (4.0 if j % 2 else 2.0)
        acc += c * cur
        cur = cur * step
        if j % 512 == 511:
            cur = np.exp(rate * h * (j + 1))
    return (h / 3.0) * acc * W


def markov_propagate(gen: MarkovGenerator, rhoS0: np.ndarray, tau_grid) -> Trajectory:
    rhoS0 = require_density(rhoS0, "rhoS0")
    if rhoS0.shape[0] != gen.dimS:
        raise DimensionError(f"rhoS0 has dimension {rhoS0.shape[0]}, expected {gen.dimS}")
    taus = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    v = rhoS0.ravel()
    states = [(expm(gen.K * t) @ v).reshape(gen.dimS, gen.dimS) for t in taus]
    return Trajectory(taus, states, {"kind": "markov", "eta": gen.eta})


def decay_rate(gen: MarkovGenerator, excited: int = 0) -> float:
    """Population loss rate of the basis state ``excited`` under K."""
    X = np.zeros((gen.dimS, gen.dimS), dtype=complex)
    X[excited, excited] = 1.0
    return float(-gen.apply(X)[excited, excited].real)


# ---------------------------------------------------------------------------
# recurrence formula

def _block_exp_top_right(A: np.ndarray, B: np.ndarray, C: np.ndarray, t: float) -> np.ndarray:
    """int_0^t exp(A (t - s)) B exp(C s) ds via expm([[A, B], [0, C]] t)."""
    n = A.shape[0]
    big = np.zeros((2 * n, 2 * n), dtype=complex)
    big[:n, :n], big[:n, n:], big[n:, n:] = A, B, C
    return expm(big * t)[:n, n:]


def frame_dense(frame: EigenFrame) -> dict[str, np.ndarray]:
    """Dense L_0, L_SB, P, Q in the frame basis (row-major)."""
    D = frame.D
    n2 = D * D
    L0 = np.diag(-1j * frame.nu.ravel())
    H = frame.H_SB
    eye = np.eye(D)
    LSB = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    P = np.empty((n2, n2), dtype=complex)
    E = np.zeros((D, D), dtype=complex)
    for k in range(n2):
        E.flat[k] = 1.0
        P[:, k] = frame.P(E).ravel()
        E.flat[k] = 0.0
    return {"L0": L0, "LSB": LSB, "P": P, "Q": np.eye(n2) - P}


def verify_recurrence(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, m: int,
                      tau: float, lam: float, dt: float | None = None, window_samples: int = 200,
                      guard: bool = True, zero_tol: float = 1e-9) -> dict:
    """Check the three-term recurrence for R_m against a direct evaluation.

    In a finite model L_0 + i omega_m has zero modes inside the Q-range, so
    the resolvent term is taken as a pseudo-inverse and the zero modes carry
    their exact secular parts: T Q Z from the free integral and
    lam Z Q L_SB Q int_0^T (T - t) exp((L_0' + i omega_m) t) dt from the
    convolution.  Both are reported; they are what an infinite mixing bath
    removes.
    """
    T = _check_window(spec, tau, lam, guard)
    s = spec.with_coupling(lam)
    if s.D > MAX_DENSE_DIM:
        raise DimensionError(f"recurrence check needs D <= {MAX_DENSE_DIM}")
    frame = EigenFrame(s, pair, bohr)
    ops = frame_dense(frame)
    n2 = s.D ** 2
    w = bohr.omegas[m]
    Q, L0, LSB = ops["Q"], ops["L0"], ops["LSB"]
    B = Q @ LSB @ Q
    L0p = L0 + lam * B
    a = -1j * (frame.nu.ravel() - w)            # eigenvalues of L_0 + i omega_m
    zero = np.abs(a) <= zero_tol
    a_inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, a))
    Ainv = np.diag(a_inv)
    Z = np.diag(zero.astype(float))
    C = L0p + 1j * w * np.eye(n2)

    R = Q @ _van_loan_integral(C, T)
    term1 = Q @ np.diag(a_inv * (np.exp(a * T) - 1.0)) + T * Q @ Z
    conv = _block_exp_top_right(L0, B, L0p, T)
    term2 = lam * np.exp(1j * w * T) * (Q @ Ainv @ conv)
    term3 = -lam * Q @ Ainv @ LSB @ R
    # int_0^T (T - u) exp(C u) du from a 3x3 block exponential
    big = np.zeros((3 * n2, 3 * n2), dtype=complex)
    big[:n2, :n2] = C
    big[:n2, n2:2 * n2] = np.eye(n2)
    big[n2:2 * n2, 2 * n2:] = np.eye(n2)
    ramp = expm(big * T)[:n2, 2 * n2:]
    term4 = lam * Z @ B @ ramp
    rhs = term1 + term2 + term3 + term4
    residual = float(np.linalg.norm(R - rhs, 2))
    normR = float(np.linalg.norm(R, 2))

    conv_max = _convolution_profile(L0, B, L0p, 2 * T, window_samples)
    half = len(conv_max) // 2
    max1, max2 = float(max(conv_max[:half + 1])), float(max(conv_max))
    T_half = tau / (lam / 2) ** 2
    R_half = None
    if not guard or s.window is None or T_half <= s.window.usable:
        R_half = Q @ _van_loan_integral(L0 + 0.5 * lam * B + 1j * w * np.eye(n2), T_half)
    report = {
        "m": m, "omega_m": float(w), "tau": tau, "lambda": lam, "T": T,
        "residual": residual, "relative_residual": residual / max(normR, 1e-300), "norm_R": normR,
        "resolvent_term": float(np.linalg.norm(term1 - T * Q @ Z, 2)),
        "convolution_term": float(np.linalg.norm(term2, 2)),
        "feedback_term": float(np.linalg.norm(term3, 2)),
        "secular_free": float(np.linalg.norm(T * Q @ Z, 2)),
        "secular_convolution": float(np.linalg.norm(term4, 2)),
        "zero_modes_in_Q": int(np.linalg.matrix_rank(Q @ Z, tol=1e-9)) if zero.any() else 0,
        "convolution_max_window": max1,
        "convolution_max_doubled": max2,
        "convolution_growth": max2 / max(max1, 1e-300),
        "lambda3_norm_R": lam ** 3 * normR,
        "lambda3_norm_R_half": None if R_half is None else (lam / 2) ** 3 * float(np.linalg.norm(R_half, 2)),
    }
    return report


def _convolution_profile(L0, B, L0p, T, samples):
    n = L0.shape[0]
    big = np.zeros((2 * n, 2 * n), dtype=complex)
    big[:n, :n], big[:n, n:], big[n:, n:] = L0, B, L0p
    step = expm(big * (T / samples))
    cur = np.eye(2 * n, dtype=complex)
    out = [0.0]
    for _ in range(samples):
        cur = step @ cur
        out.append(float(np.linalg.norm(cur[:n, n:], 2)))
    return out


def key_formula_gap(pair: ProjectorPair, spec: ModelSpec, bohr: BohrDecomposition, m: int,
                    tau: float, lam: float, eta: float, guard: bool = True) -> float:
    """||R_m(tau) + Q (L_0 + i omega_m - eta)^{-1}||_2, which vanishes in the van Hove limit
    of a mixing bath."""
    s = spec.with_coupling(lam)
    ops = liouvillian_dense(s, pair)
    R = R_operator(pair, s, bohr, m, tau, lam, guard=guard).dense()
    n2 = s.D ** 2
    A = ops["L0"] + (1j * bohr.omegas[m] - eta) * np.eye(n2)
    return float(np.linalg.norm(R + ops["Q"] @ np.linalg.inv(A), 2))


def projected_propagator_sup(pair: ProjectorPair, spec: ModelSpec, T: float, samples: int = 200) -> float:
    """max over a uniform grid on [0, T] of ||Q exp(L_0' t)||_2 (dense models)."""
    M = liouvillian_dense(spec, pair)
    step = expm(M["L0p"] * (T / samples))
    cur = np.eye(M["L0p"].shape[0], dtype=complex)
    best = float(np.linalg.norm(M["Q"], 2))
    for _ in range(samples):
        cur = step @ cur
        best = max(best, float(np.linalg.norm(M["Q"] @ cur, 2)))
    return best
