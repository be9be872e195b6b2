"""Finite system + reservoir models, reference states and sector-form initial states."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .core import (
    HERM_TOL,
    MAX_DENSE_DIM,
    DimensionError,
    ValidationError,
    as_operator,
    check_dim,
    dagger,
    partial_trace_bath,
    require_density,
    require_hermitian,
)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# |e> is index 0, |g> is index 1, so sigma_+ = |e><g|
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()


@dataclass(frozen=True)
class Tolerances:
    herm_tol: float = HERM_TOL
    stat_tol: float = 1e-9
    degeneracy_tol: float = 1e-8


@dataclass(frozen=True)
class BathWindow:
    """Time window in which a finite bath emulates a mixing reservoir."""

    t_rec: float
    usable_fraction: float = 0.5

    def __post_init__(self):
        if not self.t_rec > 0:
            raise ValueError(f"recurrence time must be positive, got {self.t_rec}")
        if not 0 < self.usable_fraction <= 1:
            raise ValueError(f"usable_fraction must lie in (0, 1], got {self.usable_fraction}")

    @property
    def usable(self) -> float:
        return self.usable_fraction * self.t_rec


class WindowError(ValueError):
    """A requested time exceeds the usable window of the finite bath."""


@dataclass(frozen=True, eq=False)
class ModelSpec:
    dimS: int
    dimB: int
    H_S: np.ndarray
    H_B: np.ndarray
    H_SB: np.ndarray
    lam: float
    omega_B: np.ndarray
    tolerances: Tolerances = field(default_factory=Tolerances)
    window: BathWindow | None = None
    name: str = "custom"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dimS < 1 or self.dimB < 1:
            raise DimensionError("dimS and dimB must be positive")
        D = self.dimS * self.dimB
        for label, M, d in (("H_S", self.H_S, self.dimS), ("H_B", self.H_B, self.dimB),
                            ("H_SB", self.H_SB, D), ("omega_B", self.omega_B, self.dimB)):
            M = as_operator(M)
            if M.shape[0] != d:
                raise DimensionError(f"{label} has dimension {M.shape[0]}, expected {d}")
            object.__setattr__(self, label, M)
        tol = self.tolerances.herm_tol
        require_hermitian(self.H_S, "H_S", tol)
        require_hermitian(self.H_B, "H_B", tol)
        require_hermitian(self.H_SB, "H_SB", tol)
        require_density(self.omega_B, "omega_B", tol)
        if self.lam < 0:
            raise ValueError(f"coupling must be non-negative, got {self.lam}")
        if self.window is None:
            object.__setattr__(self, "window", estimate_window(self.H_B))

    @property
    def D(self) -> int:
        return self.dimS * self.dimB

    def stationarity_residual(self) -> float:
        return float(np.linalg.norm(self.H_B @ self.omega_B - self.omega_B @ self.H_B))

    def H0(self) -> np.ndarray:
        return np.kron(self.H_S, np.eye(self.dimB)) + np.kron(np.eye(self.dimS), self.H_B)

    def H_total(self) -> np.ndarray:
        return self.H0() + self.lam * self.H_SB

    def with_coupling(self, lam: float) -> "ModelSpec":
        return replace(self, lam=float(lam))

    def with_reference(self, omega_B: np.ndarray) -> "ModelSpec":
        return replace(self, omega_B=as_operator(omega_B))

    def with_interaction(self, H_SB: np.ndarray) -> "ModelSpec":
        return replace(self, H_SB=as_operator(H_SB))

    def check_time(self, t: float, what: str = "time") -> None:
        if self.window is not None and t > self.window.usable * (1 + 1e-12):
            raise WindowError(
                f"{what} {t:.6g} exceeds the usable bath window {self.window.usable:.6g} "
                f"(0.5 x recurrence time {self.window.t_rec:.6g})")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dimS": self.dimS,
            "dimB": self.dimB,
            "H_S": _encode(self.H_S),
            "H_B": _encode(self.H_B),
            "H_SB": _encode(self.H_SB),
            "lambda": self.lam,
            "omega_B": _encode(self.omega_B),
            "tolerances": {"herm_tol": self.tolerances.herm_tol,
                           "stat_tol": self.tolerances.stat_tol,
                           "degeneracy_tol": self.tolerances.degeneracy_tol},
            "window": None if self.window is None else {
                "t_rec": self.window.t_rec, "usable_fraction": self.window.usable_fraction},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        win = doc.get("window")
        return cls(
            dimS=int(doc["dimS"]),
            dimB=int(doc["dimB"]),
            H_S=_decode(doc["H_S"]),
            H_B=_decode(doc["H_B"]),
            H_SB=_decode(doc["H_SB"]),
            lam=float(doc["lambda"]),
            omega_B=_decode(doc["omega_B"]),
            tolerances=Tolerances(**doc.get("tolerances", {})),
            window=None if win is None else BathWindow(**win),
            name=doc.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def _encode(M: np.ndarray) -> list:
    """Row-major nested list of [re, im] pairs."""
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(M)]


def _decode(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ValueError("matrix must be encoded as rows of [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


encode_matrix = _encode
decode_matrix = _decode


def min_level_gap(H: np.ndarray, tol: float = 1e-9) -> float:
    ev = np.unique(np.round(np.linalg.eigvalsh(H) / tol) * tol)
    gaps = np.diff(ev)
    gaps = gaps[gaps > tol]
    return float(gaps.min()) if gaps.size else np.inf


def estimate_window(H_B: np.ndarray, usable_fraction: float = 0.5) -> BathWindow | None:
    """t_rec = 2 pi / (smallest gap between distinct bath levels)."""
    gap = min_level_gap(H_B)
    if not np.isfinite(gap):
        return None
    return BathWindow(2 * np.pi / gap, usable_fraction)


def thermal_state(H: np.ndarray, beta: float) -> np.ndarray:
    E, V = np.linalg.eigh(H)
    w = np.exp(-beta * (E - E.min()))
    w /= w.sum()
    return (V * w) @ dagger(V)


def kron_all(ops: Sequence[np.ndarray]) -> np.ndarray:
    out = np.eye(1, dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def embed_site(op: np.ndarray, site: int, n: int) -> np.ndarray:
    ops = [np.eye(2, dtype=complex)] * n
    ops = list(ops)
    ops[site] = op
    return kron_all(ops)


def flat_profile(g: float) -> Callable[[float], float]:
    return lambda w: g


def build_friedrichs_model(
    N: int,
    omega0: float = 1.0,
    band: tuple[float, float] = (0.7, 1.3),
    coupling_profile: Callable[[float], float] | float = 0.05,
    lam: float = 0.0,
    jitter: float = 0.0,
    seed: int = 0,
) -> ModelSpec:
    """Two-level atom coupled to ``N`` modes, truncated to the vacuum + single-excitation bath space.

    Bath basis: index 0 is the vacuum, index k (1..N) holds one quantum in
    mode k.  The rotating-wave coupling conserves the excitation number, so
    the truncation is exact on the states this package prepares.
    ``jitter`` perturbs each frequency by a seeded relative amount in
    ``[-jitter, jitter]`` to lift the equal-spacing degeneracy.
    """
    if N < 1:
        raise ValueError(f"need at least one bath mode, got N={N}")
    wmin, wmax = band
    if N > 1 and not wmin < wmax:
        raise ValueError(f"band must satisfy w_min < w_max, got {band}")
    dimB = N + 1
    check_dim(2 * dimB)
    freqs = np.linspace(wmin, wmax, N) if N > 1 else np.array([0.5 * (wmin + wmax)])
    if jitter:
        rng = np.random.default_rng(seed)
        freqs = freqs * (1 + jitter * rng.uniform(-1, 1, size=N))
    profile = flat_profile(coupling_profile) if np.isscalar(coupling_profile) else coupling_profile
    g = np.array([profile(w) for w in freqs], dtype=float)

    H_S = 0.5 * omega0 * SIGMA_Z
    H_B = np.diag(np.concatenate([[0.0], freqs])).astype(complex)
    lower = np.zeros((dimB, dimB), dtype=complex)   # sum_k g_k |vac><k|
    lower[0, 1:] = g
    H_SB = np.kron(SIGMA_PLUS, lower) + np.kron(SIGMA_MINUS, dagger(lower))
    omega_B = np.zeros((dimB, dimB), dtype=complex)
    omega_B[0, 0] = 1.0
    spacing = (wmax - wmin) / (N - 1) if N > 1 else None
    gaps = [spacing] if spacing else []
    gaps += [min_level_gap(H_B)]
    window = BathWindow(2 * np.pi / min(gaps))
    meta = {"freqs": freqs, "couplings": g, "omega0": omega0, "spacing": spacing,
            "band": (wmin, wmax)}
    return ModelSpec(2, dimB, H_S, H_B, H_SB, lam, omega_B, window=window,
                     name="friedrichs", meta=meta)


def friedrichs_number_operator(spec: ModelSpec) -> np.ndarray:
    """Total excitation number: atom excitation plus bath quanta."""
    n_bath = np.eye(spec.dimB)
    n_bath[0, 0] = 0.0
    return np.kron(SIGMA_PLUS @ SIGMA_MINUS, np.eye(spec.dimB)) + np.kron(np.eye(2), n_bath)


def build_spin_bath_model(
    N: int,
    beta: float,
    couplings: Sequence[float] | None = None,
    omega0: float = 1.0,
    bath_splittings: Sequence[float] | None = None,
    lam: float = 0.0,
) -> ModelSpec:
    """Qubit coupled through sigma_x sigma_x to ``N`` bath qubits, thermal reference state."""
    if N < 1:
        raise ValueError(f"need at least one bath spin, got N={N}")
    check_dim(2 ** (N + 1), MAX_DENSE_DIM)
    if couplings is None:
        couplings = [0.3 + 0.1 * j for j in range(N)]
    if bath_splittings is None:
        bath_splittings = [0.8 + 0.23 * j + 0.031 * j * j for j in range(N)]
    if len(couplings) != N or len(bath_splittings) != N:
        raise ValueError("couplings and bath_splittings need one entry per bath spin")
    dimB = 2 ** N
    H_S = 0.5 * omega0 * SIGMA_Z
    H_B = sum(0.5 * e * embed_site(SIGMA_Z, j, N) for j, e in enumerate(bath_splittings))
    X_B = sum(c * embed_site(SIGMA_X, j, N) for j, c in enumerate(couplings))
    H_SB = np.kron(SIGMA_X, X_B)
    omega_B = thermal_state(H_B, beta)
    meta = {"beta": beta, "couplings": list(couplings), "bath_splittings": list(bath_splittings)}
    return ModelSpec(2, dimB, H_S, H_B, H_SB, lam, omega_B, name="spin_bath", meta=meta)


def build_small_model(lam: float = 0.3, seed: int = 7, beta: float = 1.0) -> ModelSpec:
    """Qubit + three-level bath with a random coupling; the desk-scale test bed.

    The close pair of bath levels (gap 0.05) sets a recurrence time long
    enough that every exactness check fits inside the usable window.
    """
    rng = np.random.default_rng(seed)
    H_S = 0.5 * SIGMA_Z
    H_B = np.diag([0.0, 0.6, 0.65]).astype(complex)
    B = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    B = 0.5 * (B + dagger(B))
    A = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    A = 0.5 * (A + dagger(A))
    spec = ModelSpec(2, 3, H_S, H_B, np.kron(A, B), lam, thermal_state(H_B, beta), name="small")
    return center_interaction(spec)


def mean_field(spec: ModelSpec) -> np.ndarray:
    """tr_B[(1_S x Omega_B) H_SB], the system operator that P L_SB P picks up."""
    return partial_trace_bath(np.kron(np.eye(spec.dimS), spec.omega_B) @ spec.H_SB,
                              spec.dimS, spec.dimB)


def center_interaction(spec: ModelSpec) -> ModelSpec:
    """Move the mean-field part of the coupling into H_S so that P L_SB P = 0."""
    M = mean_field(spec)
    M = 0.5 * (M + dagger(M))
    return replace(spec,
                   H_S=spec.H_S + spec.lam * M,
                   H_SB=spec.H_SB - np.kron(M, np.eye(spec.dimB)))


@dataclass
class CorrelatedStateRecipe:
    """rho0 = sum_i L_i (1_S x Omega_B) L_i^dag, optionally trace-normalized."""

    ops_L: list
    normalize: bool = True


class DegenerateRecipeError(ValueError):
    pass


def build_correlated_state(spec: ModelSpec, recipe: CorrelatedStateRecipe,
                           return_trace: bool = False):
    sector = np.kron(np.eye(spec.dimS), spec.omega_B)
    rho = np.zeros((spec.D, spec.D), dtype=complex)
    for L in recipe.ops_L:
        L = as_operator(L)
        if L.shape[0] != spec.D:
            raise DimensionError(f"L_i has dimension {L.shape[0]}, expected {spec.D}")
        rho += L @ sector @ dagger(L)
    rho = 0.5 * (rho + dagger(rho))
    tr = float(np.trace(rho).real)
    if tr <= 1e-14:
        raise DegenerateRecipeError("every L_i annihilates the sector state; trace is zero")
    if recipe.normalize:
        rho = rho / tr
    return (rho, tr) if return_trace else rho


def controlled_coupling(theta: float, A_S: np.ndarray, B_op: np.ndarray) -> np.ndarray:
    """exp(-i theta A_S x B_op)."""
    return expm(-1j * theta * np.kron(A_S, B_op))


def friedrichs_correlated_recipe(spec: ModelSpec, excited_amp: float = 0.8,
                                 center: float | None = None, width: float = 0.1,
                                 phase: float = 0.0) -> CorrelatedStateRecipe:
    """Pure state a|e,vac> + b|g,phi> with a Lorentzian-shaped wavepacket phi.

    Built in sector form with the single operator L = |psi><e,vac|, so the
    reference state is the bath vacuum.
    """
    meta = spec.meta
    freqs = meta["freqs"]
    center = meta["omega0"] if center is None else center
    amp = 1.0 / (freqs - center - 1j * width)
    phi = np.zeros(spec.dimB, dtype=complex)
    phi[1:] = amp / np.linalg.norm(amp)
    a = excited_amp
    b = np.sqrt(1 - a * a) * np.exp(1j * phase)
    e_vac = np.kron([1, 0], np.eye(spec.dimB)[0]).astype(complex)
    psi = a * e_vac + b * np.kron([0, 1], phi)
    return CorrelatedStateRecipe([np.outer(psi, e_vac.conj())])
