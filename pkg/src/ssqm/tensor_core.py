"""Superoperator construction, fidelity evaluation and Hermitian matrix functions.

A map state is a ``(D, n)`` complex array ``U`` with orthonormal rows when
feasible. It is flattened row by row, so component ``p = j * n + k`` of the
vector holds ``U[j, k]``. A superoperator ``S`` is a Hermitian ``(D*n, D*n)``
matrix and the fidelity of ``U`` is the quadratic form ``vec(U)^H S vec(U)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla

HERMITIAN_TOL = 1e-12
FEASIBILITY_TOL = 1e-9
SQRT_CLIP = 1e-14


@dataclass(frozen=True)
class SuperOp:
    """Hermitian quadratic form acting on vectorized ``D x n`` maps."""

    matrix: np.ndarray
    D: int
    n: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        N = self.D * self.n
        if m.shape != (N, N):
            raise ValueError(f"superoperator must be {N}x{N}, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return self.D * self.n

    def norm(self) -> float:
        """Spectral norm of the matrix."""
        return float(np.linalg.norm(self.matrix, 2))

    def apply(self, U: np.ndarray) -> np.ndarray:
        """Tensor action ``S U`` returned as a ``D x n`` matrix."""
        return devectorize(self.matrix @ vectorize(U), self.D, self.n)


@dataclass
class MappingSample:
    """Weighted observations of state mappings.

    Pure samples hold ``psi`` (M, n) and ``phi`` (M, D) arrays. Mixed samples
    hold ``rho`` (M, n, n) and ``varrho`` (M, D, D) arrays.
    """

    mode: str
    psi: np.ndarray | None = None
    phi: np.ndarray | None = None
    rho: np.ndarray | None = None
    varrho: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == "pure":
            if self.psi is None or self.phi is None:
                raise ValueError("pure sample needs psi and phi")
            self.psi = np.atleast_2d(np.asarray(self.psi, dtype=complex))
            self.phi = np.atleast_2d(np.asarray(self.phi, dtype=complex))
            M = self.psi.shape[0]
            if self.phi.shape[0] != M:
                raise ValueError("psi and phi record counts differ")
            norms = np.concatenate([np.linalg.norm(self.psi, axis=1), np.linalg.norm(self.phi, axis=1)])
            if np.any(np.abs(norms - 1) > 1e-8):
                raise ValueError("pure sample states must be normalized")
        elif self.mode == "mixed":
            if self.rho is None or self.varrho is None:
                raise ValueError("mixed sample needs rho and varrho")
            self.rho = np.asarray(self.rho, dtype=complex)
            self.varrho = np.asarray(self.varrho, dtype=complex)
            if self.rho.ndim != 3 or self.varrho.ndim != 3:
                raise ValueError("mixed sample needs stacks of square matrices")
            M = self.rho.shape[0]
            if self.varrho.shape[0] != M:
                raise ValueError("rho and varrho record counts differ")
        else:
            raise ValueError(f"unknown sample mode {self.mode!r}")
        if M < 1:
            raise ValueError("sample needs at least one record")
        if self.weights is None:
            self.weights = np.ones(M)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (M,) or np.any(self.weights < 0):
            raise ValueError("weights must be M nonnegative reals")

    @property
    def M(self) -> int:
        return len(self.weights)

    @property
    def D(self) -> int:
        return self.phi.shape[1] if self.mode == "pure" else self.varrho.shape[1]

    @property
    def n(self) -> int:
        return self.psi.shape[1] if self.mode == "pure" else self.rho.shape[1]


@dataclass
class SolutionPair:
    """A map state together with its Lagrange-multiplier matrix."""

    lam: np.ndarray
    U: np.ndarray
    fidelity: float
    residual: float
    iterations: int
    converged: bool
    info: dict = field(default_factory=dict)


def vectorize(U: np.ndarray) -> np.ndarray:
    """Flatten a ``D x n`` matrix row by row."""
    return np.asarray(U).reshape(-1)


def devectorize(v: np.ndarray, D: int, n: int) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    return np.asarray(v).reshape(D, n)


def gram(U: np.ndarray) -> np.ndarray:
    """Gram matrix ``G_ij = sum_k U_ik conj(U_jk)``."""
    U = np.asarray(U)
    return U @ U.conj().T


def gram_deviation(U: np.ndarray) -> float:
    """Max-abs deviation of the Gram matrix from the identity."""
    G = gram(U)
    return float(np.abs(G - np.eye(G.shape[0])).max())


def hermitian_part(X: np.ndarray) -> np.ndarray:
    """Return ``(X + X^H) / 2``."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError("hermitian_part needs a square matrix")
    return (X + X.conj().T) / 2


def is_hermitian(X: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    X = np.asarray(X)
    return X.ndim == 2 and X.shape[0] == X.shape[1] and bool(np.abs(X - X.conj().T).max(initial=0.0) <= tol)


def check_density(rho: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Validate a density matrix and return it as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if not is_hermitian(rho, max(tol, HERMITIAN_TOL)):
        raise ValueError("density matrix is not Hermitian")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("density matrix is not positive semidefinite")
    if abs(np.trace(rho).real - 1) > 1e-8:
        raise ValueError("density matrix trace differs from 1")
    return rho


def psd_sqrt(A: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Principal square root of a PSD matrix, eigenvalues below 1e-14 clipped."""
    A = np.asarray(A, dtype=complex)
    w, V = np.linalg.eigh(hermitian_part(A))
    if w.min() < -tol:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.where(w < SQRT_CLIP, 0.0, w)
    return (V * np.sqrt(w)) @ V.conj().T


def build_superop_pure(sample: MappingSample) -> SuperOp:
    """Superoperator whose form gives ``sum_l w_l |<phi_l|U|psi_l>|^2``."""
    if sample.mode != "pure":
        raise ValueError("build_superop_pure needs a pure sample")
    # rows of V are vec(phi psi^H)
    V = np.einsum("lj,lk->ljk", sample.phi, sample.psi.conj()).reshape(sample.M, -1)
    S = (V.T * sample.weights) @ V.conj()
    return SuperOp(hermitian_part(S), sample.D, sample.n)


def build_superop_mixed_unitary(sample: MappingSample, tol: float = 1e-10) -> SuperOp:
    """Superoperator whose form gives ``sum_l w_l Tr(sqrt(varrho_l) U sqrt(rho_l) U^H)``.

    This underestimates the true mixed-state fidelity when the mapping is poor.
    """
    if sample.mode != "mixed":
        raise ValueError("build_superop_mixed_unitary needs a mixed sample")
    D, n = sample.D, sample.n
    S = np.zeros((D * n, D * n), dtype=complex)
    for w, r, vr in zip(sample.weights, sample.rho, sample.varrho):
        S += w * np.kron(psd_sqrt(vr, tol), psd_sqrt(r, tol).conj())
    return SuperOp(hermitian_part(S), D, n)


def build_superop_autocorr(trajectory: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> SuperOp:
    """Mixed-state superoperator from consecutive pairs of a density-matrix trajectory."""
    traj = np.asarray(trajectory, dtype=complex)
    if traj.ndim != 3 or len(traj) < 2:
        raise ValueError("trajectory needs at least two density matrices")
    sample = MappingSample("mixed", rho=traj[:-1], varrho=traj[1:], weights=weights)
    return build_superop_mixed_unitary(sample)


def build_superop_two_hamiltonian(lam: np.ndarray, nu: np.ndarray, literal_index: bool = False) -> SuperOp:
    """Superoperator with action ``S U = lam U + U nu``.

    With ``literal_index`` the second term uses ``nu`` in place of ``nu^T``;
    the two agree for real symmetric ``nu``.
    """
    lam = np.asarray(lam, dtype=complex)
    nu = np.asarray(nu, dtype=complex)
    if not (is_hermitian(lam) and is_hermitian(nu)):
        raise ValueError("lam and nu must be Hermitian")
    D, n = lam.shape[0], nu.shape[0]
    right = nu if literal_index else nu.T
    return SuperOp(np.kron(lam, np.eye(n)) + np.kron(np.eye(D), right), D, n)


def _real_form(value: complex, scale: float) -> float:
    if abs(value.imag) > 1e-12 * max(1.0, scale):
        raise ValueError(f"quadratic form has imaginary part {value.imag:.3e}; superoperator is not Hermitian")
    return float(value.real)


def fidelity(S: SuperOp, U: np.ndarray) -> float:
    """Quadratic form ``vec(U)^H S vec(U)``."""
    U = np.asarray(U)
    if U.shape != (S.D, S.n):
        raise ValueError(f"map shape {U.shape} does not match superoperator ({S.D}, {S.n})")
    u = vectorize(U)
    value = np.vdot(u, S.matrix @ u)
    return _real_form(value, float(np.abs(S.matrix).max(initial=0.0)) * np.vdot(u, u).real)


def fidelity_matrix(S: SuperOp, states: Sequence[np.ndarray]) -> np.ndarray:
    """Matrix ``F[s, t] = <U_s|S|U_t>``."""
    X = np.array([vectorize(U) for U in states])
    return X.conj() @ S.matrix @ X.T


def unitary_from_hamiltonian(H: np.ndarray, t: float = 1.0, hbar: float = 1.0) -> np.ndarray:
    """Exact propagator ``exp(-i t H / hbar)`` via eigendecomposition."""
    H = np.asarray(H, dtype=complex)
    if not is_hermitian(H, 1e-10):
        raise ValueError("Hamiltonian must be Hermitian")
    w, V = np.linalg.eigh(hermitian_part(H))
    return (V * np.exp(-1j * t / hbar * w)) @ V.conj().T


def hamiltonian_from_unitary(U: np.ndarray, tau: float = 1.0, hbar: float = 1.0, tol: float = 1e-10) -> np.ndarray:
    """Principal-branch Hamiltonian ``H = i (hbar / tau) ln U``.

    Eigenphases are taken in ``(-pi, pi]``. Any branch shift by ``2 pi hbar / tau``
    on an eigenvalue yields the same propagator, so this is one choice of many.
    """
    U = np.asarray(U, dtype=complex)
    if U.ndim != 2 or U.shape[0] != U.shape[1] or gram_deviation(U) > tol:
        raise ValueError("input is not unitary")
    # the Schur form of a normal matrix is diagonal with orthonormal vectors
    T, Z = sla.schur(U, output="complex")
    theta = np.angle(np.diag(T))
    theta = np.where(theta <= -np.pi + 1e-15, np.pi, theta)
    # U = exp(-i tau H / hbar) so the eigenvalues of H are -hbar theta / tau
    H = (Z * (-hbar * theta / tau)) @ Z.conj().T
    return hermitian_part(H)


def crank_nicolson_step(H: np.ndarray, tau: float, hbar: float = 1.0) -> np.ndarray:
    """Cayley approximation ``(I + i tau H / 2 hbar)^-1 (I - i tau H / 2 hbar)``.

    Unitary for Hermitian ``H`` with error ``O((tau H / hbar)^3)`` against the exact propagator.
    """
    H = np.asarray(H, dtype=complex)
    A = 0.5j * tau / hbar * H
    eye = np.eye(H.shape[0])
    return np.linalg.solve(eye + A, eye - A)


def true_mixed_fidelity(varrho: np.ndarray, sigma: np.ndarray) -> float:
    """Trace norm of ``sqrt(varrho) sqrt(sigma)``."""
    a = psd_sqrt(check_density(varrho))
    b = psd_sqrt(check_density(sigma))
    return float(np.linalg.svd(a @ b, compute_uv=False).sum())
