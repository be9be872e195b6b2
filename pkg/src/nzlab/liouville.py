"""Liouvillians, Bohr decomposition of the system Liouvillian, and the projector pair."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    MAX_DENSE_DIM,
    DimensionError,
    ValidationError,
    as_operator,
    dagger,
    partial_trace_bath,
    random_matrix,
    require_hermitian,
)
from .model import ModelSpec


class Superoperator:
    """Linear map on ``d x d`` operators, stored either densely or as a callable.

    The dense form acts on row-major vectorized operators.  Composition
    with ``@``, sums and scalar multiples stay matrix-free unless both
    operands are dense.
    """

    def __init__(self, d: int, fn: Callable[[np.ndarray], np.ndarray] | None = None,
                 matrix: np.ndarray | None = None, label: str = ""):
        if fn is None and matrix is None:
            raise ValueError("need a callable or a matrix")
        self.d = d
        self._fn = fn
        self._matrix = None if matrix is None else np.asarray(matrix, dtype=complex)
        self.label = label

    @property
    def dim(self) -> int:
        return self.d * self.d

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self._matrix is not None:
            return (self._matrix @ np.asarray(X).ravel()).reshape(self.d, self.d)
        return self._fn(X)

    def dense(self, cap: int = MAX_DENSE_DIM) -> np.ndarray:
        if self._matrix is None:
            if self.d > cap:
                raise DimensionError(f"refusing to densify a superoperator on dimension {self.d} > {cap}")
            n = self.d
            cols = np.empty((n * n, n * n), dtype=complex)
            E = np.zeros((n, n), dtype=complex)
            for k in range(n * n):
                E.flat[k] = 1.0
                cols[:, k] = self._fn(E).ravel()
                E.flat[k] = 0.0
            self._matrix = cols
        return self._matrix

    def __matmul__(self, other: "Superoperator") -> "Superoperator":
        if self._matrix is not None and other._matrix is not None:
            return Superoperator(self.d, matrix=self._matrix @ other._matrix)
        return Superoperator(self.d, lambda X: self(other(X)))

    def __add__(self, other: "Superoperator") -> "Superoperator":
        if self._matrix is not None and other._matrix is not None:
            return Superoperator(self.d, matrix=self._matrix + other._matrix)
        return Superoperator(self.d, lambda X: self(X) + other(X))

    def __sub__(self, other: "Superoperator") -> "Superoperator":
        return self + (-1.0) * other

    def __rmul__(self, c: complex) -> "Superoperator":
        if self._matrix is not None:
            return Superoperator(self.d, matrix=c * self._matrix)
        return Superoperator(self.d, lambda X: c * self(X))

    def __neg__(self) -> "Superoperator":
        return (-1.0) * self

    @classmethod
    def identity(cls, d: int) -> "Superoperator":
        return cls(d, lambda X: np.array(X, dtype=complex, copy=True), label="1")

    @classmethod
    def zero(cls, d: int) -> "Superoperator":
        return cls(d, lambda X: np.zeros((d, d), dtype=complex), label="0")


def liouvillian(H: np.ndarray, tol: float = 1e-9) -> Superoperator:
    """L(X) = -i[H, X]."""
    H = require_hermitian(H, "Hamiltonian", tol)
    return Superoperator(H.shape[0], lambda X: -1j * (H @ X - X @ H), label="L")


def liouvillian_matrix(H: np.ndarray) -> np.ndarray:
    d = H.shape[0]
    eye = np.eye(d)
    return -1j * (np.kron(H, eye) - np.kron(eye, H.T))


def cluster_values(values: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Group sorted values into clusters whose consecutive gaps are <= tol.

    Returns the cluster means and, for every input value, its cluster index.
    """
    order = np.argsort(values, kind="stable")
    labels = np.empty(values.size, dtype=int)
    centers: list[list[float]] = []
    prev = None
    for idx in order:
        v = values[idx]
        if prev is None or v - prev > tol:
            centers.append([])
        centers[-1].append(v)
        labels[idx] = len(centers) - 1
        prev = v
    return np.array([np.mean(c) for c in centers]), labels


@dataclass
class BohrDecomposition:
    """L_S = -i sum_m omega_m Qt_m with Qt_m the projector onto span{|i><j| : E_i - E_j = omega_m}.

    ``masks[m]`` is the 0/1 pattern of Qt_m in the eigenbasis ``vectors`` of H_S.
    """

    omegas: np.ndarray
    masks: np.ndarray
    energies: np.ndarray
    vectors: np.ndarray
    degeneracy_tol: float

    @property
    def dimS(self) -> int:
        return self.energies.size

    def __len__(self) -> int:
        return self.omegas.size

    def rank(self, m: int) -> int:
        return int(self.masks[m].sum())

    def project(self, m: int, X: np.ndarray, dimB: int = 1) -> np.ndarray:
        """Apply Qt_m (acting on the system factor) to an operator on dimS * dimB."""
        V = self.vectors
        dS = self.dimS
        Y = np.asarray(X).reshape(dS, dimB, dS, dimB)
        Y = np.einsum("ia,ibjc,jd->abdc", V.conj(), Y, V)
        Y = Y * self.masks[m][:, None, :, None]
        Y = np.einsum("ai,ibjc,dj->abdc", V, Y, V.conj())
        return Y.reshape(dS * dimB, dS * dimB)

    def superoperator(self, m: int, dimB: int = 1) -> Superoperator:
        return Superoperator(self.dimS * dimB, lambda X: self.project(m, X, dimB), label=f"Q{m}")

    def evolve(self, X: np.ndarray, t: float, dimB: int = 1) -> np.ndarray:
        """exp(L_S t) X through the spectral resolution sum_m exp(-i omega_m t) Qt_m X."""
        out = np.zeros_like(np.asarray(X, dtype=complex))
        for m, w in enumerate(self.omegas):
            out += np.exp(-1j * w * t) * self.project(m, X, dimB)
        return out

    def index_of(self, omega: float) -> int:
        k = int(np.argmin(np.abs(self.omegas - omega)))
        if abs(self.omegas[k] - omega) > max(self.degeneracy_tol, 1e-12):
            raise KeyError(f"no Bohr frequency at {omega}")
        return k

    def most_degenerate(self) -> int:
        ranks = self.masks.reshape(len(self), -1).sum(axis=1)
        return int(np.argmax(ranks))


def bohr_decomposition(H_S: np.ndarray, tol: float | None = None) -> BohrDecomposition:
    """Cluster the Bohr frequencies E_i - E_j of ``H_S``; default tol is 1e-8 * ||H_S||."""
    H_S = require_hermitian(H_S, "H_S")
    E, V = np.linalg.eigh(H_S)
    if tol is None:
        tol = 1e-8 * max(np.linalg.norm(H_S, 2), 1.0)
    nu = (E[:, None] - E[None, :]).ravel()
    omegas, labels = cluster_values(nu, tol)
    masks = np.zeros((omegas.size, E.size, E.size))
    for flat, lab in enumerate(labels):
        masks[lab].flat[flat] = 1.0
    return BohrDecomposition(omegas, masks, E, V, tol)


@dataclass
class ProjectorPair:
    """P X = tr_B(X) x Omega_B and Q = 1 - P on the product space."""

    dimS: int
    dimB: int
    reference: np.ndarray

    def P(self, X: np.ndarray) -> np.ndarray:
        return np.kron(partial_trace_bath(X, self.dimS, self.dimB), self.reference)

    def Q(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) - self.P(X)

    def reduce(self, X: np.ndarray) -> np.ndarray:
        """System factor of a P-ranged operator, i.e. tr_B X."""
        return partial_trace_bath(X, self.dimS, self.dimB)

    def lift(self, X_S: np.ndarray) -> np.ndarray:
        return np.kron(X_S, self.reference)

    @property
    def P_op(self) -> Superoperator:
        return Superoperator(self.dimS * self.dimB, self.P, label="P")

    @property
    def Q_op(self) -> Superoperator:
        return Superoperator(self.dimS * self.dimB, self.Q, label="Q")


class NonStationaryReferenceError(ValidationError):
    pass


def build_projectors(spec: ModelSpec, reference: np.ndarray | None = None) -> ProjectorPair:
    """Projector pair on ``spec.omega_B`` (or an explicit stationary ``reference``)."""
    ref = spec.omega_B if reference is None else as_operator(reference)
    if ref.shape != (spec.dimB, spec.dimB):
        raise DimensionError(f"reference state has shape {ref.shape}, expected ({spec.dimB}, {spec.dimB})")
    res = float(np.linalg.norm(spec.H_B @ ref - ref @ spec.H_B))
    if res > spec.tolerances.stat_tol:
        raise NonStationaryReferenceError(
            f"reference state is not stationary: ||[H_B, Omega_B]|| = {res:.3e} "
            f"> stat_tol {spec.tolerances.stat_tol:.1e}")
    return ProjectorPair(spec.dimS, spec.dimB, ref)


def model_liouvillians(spec: ModelSpec) -> dict[str, Superoperator]:
    """L_S, L_B, L_SB and L_0 lifted to the product space (L_SB excludes the coupling constant)."""
    eS, eB = np.eye(spec.dimS), np.eye(spec.dimB)
    return {
        "L_S": liouvillian(np.kron(spec.H_S, eB)),
        "L_B": liouvillian(np.kron(eS, spec.H_B)),
        "L_SB": liouvillian(spec.H_SB),
        "L_0": liouvillian(spec.H0()),
    }


ALGEBRA_CHECKS = ("P2-P", "Q2-Q", "PQ", "QP", "[P,L_S]", "PL_B", "L_BP", "L_BQ-L_B",
                  "QL_B-L_B", "PL_SBP")


def verify_projector_algebra(pair: ProjectorPair, spec: ModelSpec, probes: int = 20,
                             seed: int = 0, tol: float = 1e-9) -> dict:
    """Largest relative residual of each projector identity over seeded random probes.

    ``PL_SBP`` is reported for the bare interaction Liouvillian (no coupling
    constant), so it flags an uncentered model even at zero coupling.
    """
    rng = np.random.default_rng(seed)
    Ls = model_liouvillians(spec)
    P, Q = pair.P, pair.Q
    L_S, L_B, L_SB = Ls["L_S"], Ls["L_B"], Ls["L_SB"]
    checks = {
        "P2-P": lambda X: P(P(X)) - P(X),
        "Q2-Q": lambda X: Q(Q(X)) - Q(X),
        "PQ": lambda X: P(Q(X)),
        "QP": lambda X: Q(P(X)),
        "[P,L_S]": lambda X: P(L_S(X)) - L_S(P(X)),
        "PL_B": lambda X: P(L_B(X)),
        "L_BP": lambda X: L_B(P(X)),
        "L_BQ-L_B": lambda X: L_B(Q(X)) - L_B(X),
        "QL_B-L_B": lambda X: Q(L_B(X)) - L_B(X),
        "PL_SBP": lambda X: P(L_SB(P(X))),
    }
    residuals = {k: 0.0 for k in checks} if probes else {}
    for _ in range(probes):
        X = random_matrix(spec.D, rng)
        X /= np.linalg.norm(X)
        for k, f in checks.items():
            residuals[k] = max(residuals[k], float(np.linalg.norm(f(X))))
    worst = max(residuals.values(), default=0.0)
    return {"probes": probes, "tolerance": tol, "residuals": residuals,
            "max_residual": worst, "passed": bool(worst <= tol)}
