"""Product eigenbasis of H_0 = H_S + H_B, where L_0 is diagonal.

Every propagation in :mod:`nzlab.nz` runs here.  Because the eigenbasis is a
product ``V_S x V_B``, partial traces and the projector P keep their form;
only the reference state and the coupling are rotated.
"""

from __future__ import annotations

import numpy as np

from .core import dagger
from .liouville import BohrDecomposition, ProjectorPair
from .model import ModelSpec


def _moments(theta: np.ndarray, kmax: int = 3) -> np.ndarray:
    """M_k(theta) = int_0^1 u^k exp(i theta u) du for k = 0..kmax, elementwise."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty((kmax + 1,) + theta.shape, dtype=complex)
    small = np.abs(theta) < 0.5
    # series for small |theta|: sum_n (i theta)^n / (n! (n + k + 1))
    ts = theta[small]
    term = np.ones_like(ts, dtype=complex)
    acc = np.zeros((kmax + 1,) + ts.shape, dtype=complex)
    for n in range(30):
        for k in range(kmax + 1):
            acc[k] += term / (n + k + 1)
        term = term * (1j * ts) / (n + 1)
    out[(slice(None),) + (small,)] = acc
    tb = theta[~small]
    e = np.exp(1j * tb)
    # integration by parts: M_k = (e - k M_{k-1}) / (i theta)
    prev = (e - 1.0) / (1j * tb)
    out[(0,) + (~small,)] = prev
    for k in range(1, kmax + 1):
        prev = (e - k * prev) / (1j * tb)
        out[(k,) + (~small,)] = prev
    return out


def hermite_filon_weights(theta: np.ndarray) -> tuple[np.ndarray, ...]:
    """Weights for int_0^1 exp(i theta u) p(u) du with p the cubic Hermite interpolant.

    p(u) = y0 h00 + d0 h10 + y1 h01 + d1 h11 where d0, d1 are derivatives in u.
    """
    M0, M1, M2, M3 = _moments(theta)
    w_y0 = M0 - 3 * M2 + 2 * M3
    w_d0 = M1 - 2 * M2 + M3
    w_y1 = 3 * M2 - 2 * M3
    w_d1 = -M2 + M3
    return w_y0, w_d0, w_y1, w_d1


class EigenFrame:
    def __init__(self, spec: ModelSpec, pair: ProjectorPair, bohr: BohrDecomposition):
        self.spec = spec
        self.dimS, self.dimB = spec.dimS, spec.dimB
        self.D = spec.D
        self.lam = spec.lam
        self.bohr = bohr
        self.V_S = bohr.vectors
        E_B, self.V_B = np.linalg.eigh(spec.H_B)
        self.E_S = bohr.energies
        self.E_B = E_B
        self.V = np.kron(self.V_S, self.V_B)
        self.E0 = (self.E_S[:, None] + E_B[None, :]).ravel()
        self.nu = self.E0[:, None] - self.E0[None, :]
        self.H_SB = dagger(self.V) @ spec.H_SB @ self.V
        self.omega = dagger(self.V_B) @ pair.reference @ self.V_B
        self.nu_S = self.E_S[:, None] - self.E_S[None, :]
        self.omegas = bohr.omegas
        self.masks = bohr.masks

    # basis changes -------------------------------------------------------
    def to_frame(self, X: np.ndarray) -> np.ndarray:
        return dagger(self.V) @ X @ self.V

    def from_frame(self, X: np.ndarray) -> np.ndarray:
        return self.V @ X @ dagger(self.V)

    def sys_to_frame(self, X: np.ndarray) -> np.ndarray:
        return dagger(self.V_S) @ X @ self.V_S

    def sys_from_frame(self, X: np.ndarray) -> np.ndarray:
        return self.V_S @ X @ dagger(self.V_S)

    def sys_super_from_frame(self, K: np.ndarray) -> np.ndarray:
        """Row-major superoperator matrix on system operators, frame -> original basis."""
        U = np.kron(self.V_S, self.V_S.conj())
        return U @ K @ dagger(U)

    # superoperators (batched over leading axes) ---------------------------
    def trB(self, X: np.ndarray) -> np.ndarray:
        sh = X.shape[:-2]
        Y = X.reshape(sh + (self.dimS, self.dimB, self.dimS, self.dimB))
        return np.einsum("...iaja->...ij", Y)

    def lift(self, X_S: np.ndarray) -> np.ndarray:
        sh = X_S.shape[:-2]
        return np.einsum("...ij,ab->...iajb", X_S, self.omega).reshape(sh + (self.D, self.D))

    def P(self, X: np.ndarray) -> np.ndarray:
        return self.lift(self.trB(X))

    def Q(self, X: np.ndarray) -> np.ndarray:
        return X - self.P(X)

    def L0(self, X: np.ndarray) -> np.ndarray:
        return -1j * self.nu * X

    def LSB(self, X: np.ndarray) -> np.ndarray:
        return -1j * (self.H_SB @ X - X @ self.H_SB)

    def free(self, X: np.ndarray, t: float) -> np.ndarray:
        """exp(L_0 t) X."""
        return np.exp(-1j * self.nu * t) * X

    def sys_mask(self, m: int) -> np.ndarray:
        return self.masks[m]

    def Qt(self, m: int, X: np.ndarray) -> np.ndarray:
        sh = X.shape[:-2]
        Y = X.reshape(sh + (self.dimS, self.dimB, self.dimS, self.dimB))
        Y = Y * self.masks[m][:, None, :, None]
        return Y.reshape(X.shape)

    def sys_free(self, X_S: np.ndarray, t: float) -> np.ndarray:
        """exp(L_S t) on system operators in the frame."""
        return np.exp(-1j * self.nu_S * t) * X_S

    # projected propagation --------------------------------------------------
    def _rhs(self, t: float, Yt: np.ndarray) -> np.ndarray:
        """Interaction-picture generator lam e^{-L0 t} Q L_SB Q e^{L0 t}."""
        ph = np.exp(-1j * self.nu * t)
        Y = ph * Yt
        return self.lam * np.conj(ph) * self.Q(self.LSB(self.Q(Y)))

    def walk(self, Y0: np.ndarray, h: float, n_steps: int, omegas=()):
        """Step Y(t) = exp(L_0' t) Y0 on the grid t_n = n h.

        Yields ``(n, t_n, Y(t_n), S)`` where ``S[k]`` is the running integral
        int_0^{t_n} exp(i omegas[k] t) Y(t) dt, evaluated by cubic-Hermite
        Filon quadrature on the slowly varying interaction-picture operand.
        Inputs are assumed Q-ranged; a leading batch axis is allowed.
        """
        omegas = np.asarray(omegas, dtype=float)
        Yt = np.array(Y0, dtype=complex)
        S = np.zeros((omegas.size,) + Yt.shape, dtype=complex)
        weights = []
        for w in omegas:
            kappa = w - self.nu
            weights.append((kappa, hermite_filon_weights(kappa * h)))
        F = self._rhs(0.0, Yt)
        yield 0, 0.0, Yt.copy(), S.copy()
        for n in range(n_steps):
            t = n * h
            k1 = F
            k2 = self._rhs(t + 0.5 * h, Yt + 0.5 * h * k1)
            k3 = self._rhs(t + 0.5 * h, Yt + 0.5 * h * k2)
            k4 = self._rhs(t + h, Yt + h * k3)
            Yn = Yt + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            Fn = self._rhs(t + h, Yn)
            for k, (kappa, (a0, b0, a1, b1)) in enumerate(weights):
                ph = np.exp(1j * kappa * t)
                S[k] += h * ph * (a0 * Yt + h * b0 * F + a1 * Yn + h * b1 * Fn)
            Yt, F = Yn, Fn
            yield n + 1, t + h, np.exp(-1j * self.nu * (t + h)) * Yt, S.copy() if omegas.size else S
