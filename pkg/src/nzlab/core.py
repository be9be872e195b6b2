"""Dense complex operator algebra on finite Hilbert spaces.

Operators are plain ``numpy`` arrays of shape ``(d, d)``.  Vectorization is
row-major (``X.ravel()``), so the superoperator of ``X -> A @ X @ B`` is
``np.kron(A, B.T)``.
"""

from __future__ import annotations

import numpy as np

HERM_TOL = 1e-9
MAX_DENSE_DIM = 64     # Hilbert dimension cap for materialized D^2 x D^2 superoperators
MAX_MATFREE_DIM = 256  # Hilbert dimension cap for matrix-free paths


class DimensionError(ValueError):
    """Operand shapes are inconsistent or exceed a configured cap."""


class ValidationError(ValueError):
    """An operator fails a Hermiticity, trace or positivity check."""


def as_operator(X) -> np.ndarray:
    X = np.asarray(X, dtype=complex)
    if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] < 1:
        raise DimensionError(f"expected a non-empty square matrix, got shape {X.shape}")
    return X


def check_dim(d: int, cap: int = MAX_MATFREE_DIM) -> None:
    if d > cap:
        raise DimensionError(f"Hilbert dimension {d} exceeds the configured cap {cap}")


def dagger(X: np.ndarray) -> np.ndarray:
    return X.conj().T


def is_hermitian(X: np.ndarray, tol: float = HERM_TOL) -> bool:
    return bool(np.max(np.abs(X - dagger(X)), initial=0.0) <= tol)


def require_hermitian(X: np.ndarray, name: str = "operator", tol: float = HERM_TOL) -> np.ndarray:
    X = as_operator(X)
    err = np.max(np.abs(X - dagger(X)))
    if err > tol:
        raise ValidationError(f"{name} is not Hermitian (max |X - X^dag| = {err:.3e})")
    return X


def require_density(rho: np.ndarray, name: str = "state", tol: float = HERM_TOL) -> np.ndarray:
    """Validate a density matrix: Hermitian, unit trace, no eigenvalue below ``-tol``."""
    rho = require_hermitian(rho, name, tol)
    tr = np.trace(rho)
    if abs(tr - 1.0) > tol:
        raise ValidationError(f"{name} has trace {tr.real:.12g}, expected 1")
    lo = np.linalg.eigvalsh(0.5 * (rho + dagger(rho)))[0]
    if lo < -tol:
        raise ValidationError(f"{name} has negative eigenvalue {lo:.3e}")
    return rho


def tensor(A: np.ndarray, B: np.ndarray, cap: int = MAX_MATFREE_DIM) -> np.ndarray:
    A, B = as_operator(A), as_operator(B)
    check_dim(A.shape[0] * B.shape[0], cap)
    return np.kron(A, B)


def partial_trace_bath(X: np.ndarray, dimS: int, dimB: int) -> np.ndarray:
    """Trace out the second (bath) factor of an operator on ``dimS * dimB``."""
    X = np.asarray(X)
    if X.shape != (dimS * dimB, dimS * dimB):
        raise DimensionError(f"operator of shape {X.shape} is not on a {dimS}x{dimB} product space")
    return np.einsum("iaja->ij", X.reshape(dimS, dimB, dimS, dimB))


def partial_trace_system(X: np.ndarray, dimS: int, dimB: int) -> np.ndarray:
    X = np.asarray(X)
    if X.shape != (dimS * dimB, dimS * dimB):
        raise DimensionError(f"operator of shape {X.shape} is not on a {dimS}x{dimB} product space")
    return np.einsum("iaib->ab", X.reshape(dimS, dimB, dimS, dimB))


def vectorize(X: np.ndarray) -> np.ndarray:
    return as_operator(X).ravel()


def devectorize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    d = int(round(np.sqrt(v.size)))
    if v.ndim != 1 or d * d != v.size:
        raise DimensionError(f"vector of length {v.size} is not a vectorized square matrix")
    return v.reshape(d, d)


def hs_inner(X: np.ndarray, Y: np.ndarray) -> complex:
    """Hilbert-Schmidt inner product tr(X^dag Y)."""
    return complex(np.vdot(X, Y))


def hs_norm(X: np.ndarray) -> float:
    return float(np.linalg.norm(X))


def commutator(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A @ B - B @ A


class Eigensystem:
    """Cached eigendecomposition of a Hermitian matrix, used for fast propagation.

    ``conjugate(X, t)`` returns ``exp(-iHt) X exp(iHt)``; the cost is one
    basis change per call once the decomposition exists.
    """

    def __init__(self, H: np.ndarray, tol: float = HERM_TOL):
        H = require_hermitian(H, "Hamiltonian", tol)
        self.H = H
        self.energies, self.vectors = np.linalg.eigh(0.5 * (H + dagger(H)))

    def to_eigenbasis(self, X: np.ndarray) -> np.ndarray:
        return dagger(self.vectors) @ X @ self.vectors

    def from_eigenbasis(self, X: np.ndarray) -> np.ndarray:
        return self.vectors @ X @ dagger(self.vectors)

    def bohr_matrix(self) -> np.ndarray:
        """Matrix of E_a - E_b, the frequencies of |a><b| under conjugation."""
        return self.energies[:, None] - self.energies[None, :]

    def conjugate(self, X: np.ndarray, t: float) -> np.ndarray:
        phase = np.exp(-1j * self.bohr_matrix() * t)
        return self.from_eigenbasis(phase * self.to_eigenbasis(X))

    def unitary(self, t: float) -> np.ndarray:
        return (self.vectors * np.exp(-1j * self.energies * t)) @ dagger(self.vectors)


def evolve_unitary(H: np.ndarray, rho: np.ndarray, t: float, tol: float = HERM_TOL) -> np.ndarray:
    """exp(-iHt) rho exp(iHt) via the eigendecomposition of ``H``."""
    return Eigensystem(H, tol).conjugate(as_operator(rho), t)


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the trace norm of ``rho - sigma``."""
    rho, sigma = as_operator(rho), as_operator(sigma)
    if rho.shape != sigma.shape:
        raise DimensionError(f"shape mismatch {rho.shape} vs {sigma.shape}")
    return 0.5 * float(np.sum(np.linalg.svd(rho - sigma, compute_uv=False)))


def random_hermitian(d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (A + dagger(A))


def random_density(d: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    k = d if rank is None else rank
    G = rng.normal(size=(d, k)) + 1j * rng.normal(size=(d, k))
    rho = G @ dagger(G)
    return rho / np.trace(rho).real


def random_matrix(d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
