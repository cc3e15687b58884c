"""Basis changes of map/superoperator pairs and the canonical form of a solution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import estimate_lambda, residual
from .tensor_core import SolutionPair, SuperOp, fidelity, gram_deviation, hermitian_part


@dataclass(frozen=True)
class BasisPair:
    """Left unitary ``left`` (D x D) and right unitary ``right`` (n x n)."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        for name in ("left", "right"):
            M = np.asarray(getattr(self, name), dtype=complex)
            if M.ndim != 2 or M.shape[0] != M.shape[1] or gram_deviation(M) > 1e-10:
                raise ValueError(f"{name} basis matrix is not unitary")
            object.__setattr__(self, name, M)


def transform_map(U: np.ndarray, basis: BasisPair) -> np.ndarray:
    """``left U right^H``."""
    return basis.left @ np.asarray(U) @ basis.right.conj().T


def _vec_operator(basis: BasisPair) -> np.ndarray:
    # vec(A U B^H) = kron(A, conj(B)) vec(U) for row-major vectorization
    return np.kron(basis.left, basis.right.conj())


def transform_superop(S: SuperOp, basis: BasisPair) -> SuperOp:
    """Superoperator in the new basis, so that fidelities of transformed maps are unchanged."""
    if basis.left.shape[0] != S.D or basis.right.shape[0] != S.n:
        raise ValueError("basis dimensions do not match the superoperator")
    K = _vec_operator(basis)
    return SuperOp(hermitian_part(K @ S.matrix @ K.conj().T), S.D, S.n)


def _phase_fixed_eigenvectors(lam: np.ndarray):
    w, V = np.linalg.eigh(hermitian_part(lam))
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    for k in range(V.shape[1]):
        j = np.argmax(np.abs(V[:, k]) - 1e-12 * np.arange(V.shape[0]))
        V[:, k] *= abs(V[j, k]) / V[j, k]
    return w, V


def to_canonical(S: SuperOp, sol: SolutionPair, tol: float = 1e-6):
    """Rotate a converged square solution to diagonal ``lam`` and identity map.

    Rows of the left basis are the eigenvectors of ``lam`` in descending
    eigenvalue order, each with its largest-magnitude component real and
    positive. The right basis is ``left @ U``. Returns
    ``(S_new, solution_new, basis)``.
    """
    if S.D != S.n:
        raise ValueError("canonical form needs D == n")
    if not sol.residual < tol:
        raise ValueError(f"solution residual {sol.residual:.3e} is not converged")
    _, V = _phase_fixed_eigenvectors(sol.lam)
    left = V.conj().T
    basis = BasisPair(left, left @ sol.U)
    S_new = transform_superop(S, basis)
    U_new = transform_map(sol.U, basis)
    lam_new = estimate_lambda(S_new, U_new)
    res = residual(S_new, U_new, lam_new)
    new = SolutionPair(lam_new, U_new, fidelity(S_new, U_new), res, sol.iterations, sol.converged, dict(sol.info))
    return S_new, new, basis
