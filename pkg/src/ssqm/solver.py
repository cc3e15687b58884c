"""Iterative solver for ``S U = lam U`` over matrices with orthonormal rows.

Each iteration linearizes the unitarity constraints at the current iterate,
restricts the Lagrangian Hessian ``S - lam (x) I`` to the admissible subspace
and moves toward its top eigenvector. The new point is pulled back to the
constraint set by ``G^{-1/2}``, followed by Newton corrections that restore
any extra linear constraints exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .tensor_core import (
    FEASIBILITY_TOL,
    SolutionPair,
    SuperOp,
    devectorize,
    fidelity,
    gram,
    gram_deviation,
    hermitian_part,
    vectorize,
)

log = logging.getLogger(__name__)


class DegenerateIterateError(ArithmeticError):
    """The Gram matrix of an iterate is (numerically) singular."""


class InfeasibleConstraintsError(ValueError):
    """The linear constraints leave no admissible direction."""


@dataclass(frozen=True)
class SolverOptions:
    tol_residual: float = 1e-10
    max_iterations: int = 500
    selection_rank: int = 0
    seed: int = 0
    restart_count: int = 5
    initialization: str = "spectral"
    initial: np.ndarray | None = None
    relative_tol: bool = True
    real_doubled: bool = False
    stagnation_window: int = 20

    def __post_init__(self):
        if self.tol_residual <= 0:
            raise ValueError("tol_residual must be positive")
        if self.selection_rank < 0:
            raise ValueError("selection_rank must be nonnegative")
        if self.initialization not in ("spectral", "random", "provided"):
            raise ValueError(f"unknown initialization {self.initialization!r}")
        if self.initialization == "provided" and self.initial is None:
            raise ValueError("provided initialization needs an initial map")

    def threshold(self, S: SuperOp) -> float:
        """Absolute residual threshold for convergence."""
        return self.tol_residual * (max(S.norm(), 1e-300) if self.relative_tol else 1.0)


@dataclass(frozen=True)
class LinearConstraintSet:
    """Homogeneous linear constraints on the vectorized map.

    ``real_rows`` hold vectors ``c`` imposing ``Re <c, W> = 0``; ``complex_rows``
    hold vectors imposing ``<c, W> = 0``. Here ``<c, W> = c^H W``.
    """

    size: int
    real_rows: np.ndarray = field(default=None)
    complex_rows: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("real_rows", "complex_rows"):
            rows = getattr(self, name)
            rows = np.zeros((0, self.size), complex) if rows is None else np.asarray(rows, complex).reshape(-1, self.size)
            object.__setattr__(self, name, rows)

    def __len__(self) -> int:
        """Number of real scalar conditions."""
        return len(self.real_rows) + 2 * len(self.complex_rows)

    def with_complex(self, rows: Sequence[np.ndarray]) -> "LinearConstraintSet":
        if len(rows) == 0:
            return self
        extra = np.asarray([np.asarray(r, complex).reshape(-1) for r in rows])
        return replace(self, complex_rows=np.vstack([self.complex_rows, extra]))

    def evaluate(self, W: np.ndarray) -> np.ndarray:
        """Constraint values at ``W``: real parts first, then complex values."""
        w = vectorize(W)
        return np.concatenate([(self.real_rows.conj() @ w).real, self.complex_rows.conj() @ w])

    def real_matrix(self) -> np.ndarray:
        """All conditions as rows of a real ``(k, 2N)`` matrix acting on ``[Re W, Im W]``."""
        C = np.vstack([self.real_rows, self.complex_rows, 1j * self.complex_rows])
        return np.hstack([C.real, C.imag])

    def rank(self) -> int:
        if len(self) == 0:
            return 0
        return int(np.linalg.matrix_rank(self.real_matrix()))


def adjust_to_unitary(U: np.ndarray, min_eig: float = 1e-12) -> np.ndarray:
    """Closest matrix with orthonormal rows, ``G^{-1/2} U``."""
    U = np.asarray(U, dtype=complex)
    w, V = np.linalg.eigh(gram(U))
    if w.min() <= min_eig * max(1.0, w.max()):
        raise DegenerateIterateError(f"Gram matrix is singular (min eigenvalue {w.min():.3e})")
    return (V * (1 / np.sqrt(w))) @ V.conj().T @ U


def tangent_projection(U: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Project ``Z`` onto the tangent space ``{X : X U^H + U X^H = 0}`` at a feasible ``U``."""
    return Z - hermitian_part(Z @ U.conj().T) @ U


def retract(W: np.ndarray, rows: np.ndarray | None = None, max_sweeps: int = 50, tol: float = 1e-14) -> np.ndarray:
    """Map ``W`` to a feasible point that also satisfies complex-linear ``rows``.

    After the ``G^{-1/2}`` step, violations of the rows are removed by Newton
    corrections along the tangent projections of the rows, each followed by
    another ``G^{-1/2}`` step.
    """
    U = adjust_to_unitary(W)
    if rows is None or len(rows) == 0:
        return U
    D, n = U.shape
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    for _ in range(max_sweeps):
        viol = rows.conj() @ vectorize(U)
        if np.abs(viol).max() < tol:
            break
        dirs = [tangent_projection(U, devectorize(c, D, n)) for c in rows]
        dirs += [tangent_projection(U, devectorize(1j * c, D, n)) for c in rows]
        J = rows.conj() @ np.array([vectorize(d) for d in dirs]).T
        JR = np.vstack([J.real, J.imag])
        coef = np.linalg.lstsq(JR, np.concatenate([viol.real, viol.imag]), rcond=None)[0]
        U = adjust_to_unitary(U - sum(x * d for x, d in zip(coef, dirs)))
    return U


def linearized_constraints(U: np.ndarray, gauge: bool = True) -> LinearConstraintSet:
    """Tangent conditions of the unitarity surfaces at ``U``.

    For ``i < j`` the off-diagonal Gram entry has first variation
    ``<E_ij U, W> + <W, E_ji U>``; its real and imaginary parts give two real
    conditions. Each diagonal difference ``G_ii - G_00`` gives one more. The
    norm condition is handled by eigenvector normalization. With ``gauge`` the
    global phase direction ``i U`` is excluded too, which totals ``D^2`` real
    conditions for ``D >= 2`` and none for ``D = 1``.
    """
    U = np.asarray(U, dtype=complex)
    D, n = U.shape
    rows = []
    for i in range(D):
        for j in range(i + 1, D):
            a = np.zeros_like(U)
            b = np.zeros_like(U)
            a[i] = U[j]
            b[j] = U[i]
            rows.append(a + b)
            rows.append(1j * a - 1j * b)
    for i in range(1, D):
        d = np.zeros_like(U)
        d[i] = U[i]
        d[0] = -U[0]
        rows.append(d)
    if gauge and D > 1:
        rows.append(1j * U)
    return LinearConstraintSet(D * n, real_rows=[vectorize(r) for r in rows])


def hermitian_basis(D: int) -> list[np.ndarray]:
    """Real basis of the ``D^2``-dimensional space of Hermitian ``D x D`` matrices."""
    basis = []
    for i in range(D):
        E = np.zeros((D, D), complex)
        E[i, i] = 1
        basis.append(E)
        for j in range(i + 1, D):
            E = np.zeros((D, D), complex)
            E[i, j] = E[j, i] = 1
            basis.append(E)
            E = np.zeros((D, D), complex)
            E[i, j], E[j, i] = 1j, -1j
            basis.append(E)
    return basis


def estimate_lambda(S: SuperOp, U: np.ndarray) -> np.ndarray:
    """Lagrange-multiplier estimate ``Herm((S U) U^H)``."""
    return hermitian_part(S.apply(U) @ np.asarray(U).conj().T)


def residual(S: SuperOp, U: np.ndarray, lam: np.ndarray) -> float:
    """Euclidean norm of ``S vec(U) - vec(lam U)``."""
    return float(np.linalg.norm(S.apply(U) - lam @ U))


def _least_squares_multipliers(S: SuperOp, U: np.ndarray, rows: np.ndarray):
    D, n = U.shape
    basis = hermitian_basis(D)
    cols = [vectorize(E @ U) for E in basis]
    for c in rows:
        cols += [c, 1j * c]
    B = np.array(cols).T
    target = vectorize(S.apply(U))
    BR = np.vstack([B.real, B.imag])
    AR = np.concatenate([target.real, target.imag])
    x, *_ = np.linalg.lstsq(BR, AR, rcond=None)
    lam = sum(x[p] * basis[p] for p in range(len(basis)))
    alpha = x[len(basis)::2] + 1j * x[len(basis) + 1::2]
    return hermitian_part(lam), alpha, float(np.linalg.norm(AR - BR @ x))


def solve_dual(S: SuperOp, U: np.ndarray) -> np.ndarray:
    """Hermitian ``lam`` minimizing ``||S U - lam U||^2``.

    Solved as a real least-squares problem in the ``D^2`` real parameters of
    ``lam``; ``lstsq`` returns the minimum-norm solution if it is singular.
    """
    lam, _, _ = _least_squares_multipliers(S, np.asarray(U, complex), np.zeros((0, S.size)))
    return lam


def dual_objective(S: SuperOp, U: np.ndarray, lam: np.ndarray | None = None) -> float:
    """Squared residual at ``lam`` (the dual-problem minimum when ``lam`` is omitted)."""
    if lam is None:
        lam = solve_dual(S, U)
    return residual(S, U, lam) ** 2


def constrained_multipliers(S: SuperOp, U: np.ndarray, rows: np.ndarray):
    """Multipliers for ``S U = lam U + sum_h alpha_h C_h`` in the least-squares sense.

    Returns ``(lam, alpha, stationarity_residual)``. With no rows this is
    :func:`solve_dual` and the residual is the plain one.
    """
    return _least_squares_multipliers(S, np.asarray(U, complex), np.asarray(rows, complex).reshape(-1, S.size))


def _stationarity_system(S: SuperOp, U: np.ndarray, lam: np.ndarray) -> np.ndarray:
    D = U.shape[0]
    R = S.apply(U) - lam @ U
    G = U @ U.conj().T
    iu = np.triu_indices(D, 1)
    return np.concatenate([R.real.ravel(), R.imag.ravel(), np.diag(G).real - 1, G[iu].real, G[iu].imag])


def newton_polish(S: SuperOp, U: np.ndarray, lam: np.ndarray, max_steps: int = 30, tol: float = 1e-14):
    """Damped Gauss-Newton on ``S U = lam U``, ``U U^H = I`` in ``(U, lam)``.

    Converges to a nearby stationary point of any kind, saddles included,
    which the ascent iteration cannot reach. The Jacobian is rank deficient
    by the global phase, so steps are minimum-norm. Returns ``(U, lam, residual)``
    with ``lam`` re-estimated after a final ``G^{-1/2}`` cleanup.
    """
    U = np.asarray(U, dtype=complex)
    lam = hermitian_part(np.asarray(lam, dtype=complex))
    D, n = U.shape
    N = D * n
    basis = hermitian_basis(D)
    iu = np.triu_indices(D, 1)
    scale = S.norm()
    for _ in range(max_steps):
        f = _stationarity_system(S, U, lam)
        nf = np.linalg.norm(f)
        if nf < tol * max(scale, 1.0):
            break
        L = S.matrix - np.kron(lam, np.eye(n))
        cols = np.zeros((len(f), 2 * N + D * D))
        cols[:2 * N, :N] = np.vstack([L.real, L.imag])
        cols[:2 * N, N:2 * N] = np.vstack([-L.imag, L.real])
        for p in range(2 * N):
            dU = np.zeros(N, complex)
            dU[p % N] = 1 if p < N else 1j
            dU = dU.reshape(D, n)
            dG = dU @ U.conj().T
            dG = dG + dG.conj().T
            cols[2 * N:, p] = np.concatenate([np.diag(dG).real, dG[iu].real, dG[iu].imag])
        for q, E in enumerate(basis):
            dR = -(E @ U).ravel()
            cols[:2 * N, 2 * N + q] = np.concatenate([dR.real, dR.imag])
        x = np.linalg.lstsq(cols, -f, rcond=None)[0]
        dU = (x[:N] + 1j * x[N:2 * N]).reshape(D, n)
        dlam = sum(c * E for c, E in zip(x[2 * N:], basis))
        t = 1.0
        while True:
            U_t, lam_t = U + t * dU, lam + t * dlam
            if np.linalg.norm(_stationarity_system(S, U_t, lam_t)) < (1 - 1e-4 * t) * nf or t < 1e-4:
                break
            t /= 2
        U, lam = U_t, lam_t
    U = adjust_to_unitary(U)
    lam = estimate_lambda(S, U)
    return U, lam, residual(S, U, lam)


def _admissible_basis(constraints: LinearConstraintSet):
    """Orthonormal basis of the admissible subspace.

    Returns ``(Q, complex_linear)``. When only complex-linear conditions are
    present ``Q`` is a complex orthonormal basis; otherwise ``Q`` has shape
    ``(2N, m)`` and is a real orthonormal basis of the real-doubled space.
    """
    N = constraints.size
    if len(constraints.real_rows) == 0:
        rows = constraints.complex_rows
        Q = sla.null_space(rows.conj()) if len(rows) else np.eye(N, dtype=complex)
        return Q, True
    return sla.null_space(constraints.real_matrix()), False


def _real_doubled(T: np.ndarray) -> np.ndarray:
    return np.block([[T.real, -T.imag], [T.imag, T.real]])


def _select(mu, Y, rank, target):
    """Eigenvector with the ``rank + 1``-th largest eigenvalue, ties broken by overlap."""
    if rank >= len(mu):
        raise InfeasibleConstraintsError(f"selection rank {rank} exceeds subspace dimension {len(mu)}")
    k = len(mu) - 1 - rank
    spread = max(1.0, float(np.abs(mu).max()))
    deg = np.flatnonzero(np.abs(mu - mu[k]) <= 1e-10 * spread)
    if len(deg) == 1:
        return Y[:, k]
    Yd = Y[:, deg]
    y = Yd @ (Yd.conj().T @ target)
    if np.linalg.norm(y) < 1e-12:
        return Y[:, k]
    return y / np.linalg.norm(y)


def iterate_once(
    S: SuperOp,
    U: np.ndarray,
    constraints: LinearConstraintSet | None = None,
    opts: SolverOptions = SolverOptions(),
    lam: np.ndarray | None = None,
    exact_rows: bool = True,
) -> np.ndarray:
    """One step of the subspace eigen-iteration.

    ``constraints`` defaults to the tangent conditions at ``U``; complex-linear
    rows are kept exactly satisfied by the retraction. ``lam`` is the multiplier
    estimate used in the Hessian shift; by default it is fitted jointly with the
    complex-row multipliers.
    """
    U = np.asarray(U, dtype=complex)
    D, n = U.shape
    if constraints is None:
        constraints = linearized_constraints(U)
    if lam is None:
        if len(constraints.complex_rows):
            lam = constrained_multipliers(S, U, constraints.complex_rows)[0]
        else:
            lam = estimate_lambda(S, U)
    T = S.matrix - np.kron(lam, np.eye(n))
    Q, complex_linear = _admissible_basis(constraints)
    if Q.shape[1] == 0:
        raise InfeasibleConstraintsError("constraints leave an empty subspace")
    u = vectorize(U)
    if complex_linear:
        mu, Y = np.linalg.eigh(hermitian_part(Q.conj().T @ T @ Q))
        y = _select(mu, Y, opts.selection_rank, Q.conj().T @ u)
        w = Q @ y
    else:
        if opts.real_doubled:
            H = Q.T @ _real_doubled(T) @ Q
        else:
            Qc = Q[: S.size] + 1j * Q[S.size:]
            H = (Qc.conj().T @ T @ Qc).real
        mu, Y = np.linalg.eigh((H + H.T) / 2)
        y = _select(mu, Y, opts.selection_rank, Q.T @ np.concatenate([u.real, u.imag]))
        wr = Q @ y
        w = wr[: S.size] + 1j * wr[S.size:]
    w = devectorize(w * np.sqrt(D) / np.linalg.norm(w), D, n)
    rows = constraints.complex_rows if exact_rows else None
    a = np.vdot(u, vectorize(w))
    if opts.selection_rank > 0 or abs(a) < 1e-12:
        return retract(w, rows)
    direction = w / a - U
    f0 = fidelity(S, U)
    t = 1.0
    while True:
        new = retract(U + t * direction, rows)
        if fidelity(S, new) >= f0 - 1e-14 * max(1.0, abs(f0)) or t < 1e-6:
            return new
        t /= 2


def random_map(D: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-like ``D x n`` map with orthonormal rows (QR of a complex Gaussian)."""
    Z = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    Q, R = np.linalg.qr(Z)
    Q = Q * (np.diag(R) / np.abs(np.diag(R)))
    return Q[:D]


def spectral_start(S: SuperOp) -> np.ndarray:
    """Top eigenvector of ``S`` reshaped to ``D x n`` and made feasible."""
    _, V = np.linalg.eigh(S.matrix)
    return adjust_to_unitary(devectorize(V[:, -1] * np.sqrt(S.D), S.D, S.n), 1e-8)


def _initial(S: SuperOp, opts: SolverOptions, rng, attempt: int) -> np.ndarray:
    if attempt == 0 and opts.initialization == "provided":
        U0 = np.asarray(opts.initial, dtype=complex)
        if U0.shape != (S.D, S.n):
            raise ValueError(f"initial map has shape {U0.shape}, expected ({S.D}, {S.n})")
        return adjust_to_unitary(U0)
    if attempt == 0 and opts.initialization == "spectral":
        try:
            return spectral_start(S)
        except DegenerateIterateError:
            pass
    return random_map(S.D, S.n, rng)


def run_iterations(S: SuperOp, U: np.ndarray, opts: SolverOptions, extra_rows=None, measure=None,
                   exact_rows: bool = True):
    """Iterate from ``U`` until the stationarity measure drops below threshold.

    ``extra_rows`` is an optional callable returning complex-linear constraint
    rows for the current iterate; ``exact_rows`` is passed to :func:`iterate_once`.
    ``measure`` maps ``U`` to ``(lam, residual)``.
    Returns ``(U, lam, residual, iterations, converged, stagnated)``.
    """
    threshold = opts.threshold(S)
    rows_for = extra_rows or (lambda _U: np.zeros((0, S.size), complex))
    if measure is None:
        def measure(V):
            lam = estimate_lambda(S, V)
            return lam, residual(S, V, lam)
    lam, res = measure(U)
    if res < threshold:
        return U, lam, res, 0, True, False
    history = [fidelity(S, U)]
    for it in range(1, opts.max_iterations + 1):
        cons = linearized_constraints(U).with_complex(rows_for(U))
        U = iterate_once(S, U, cons, opts, exact_rows=exact_rows)
        if gram_deviation(U) > FEASIBILITY_TOL:
            raise DegenerateIterateError("iterate left the feasible set")
        lam, res = measure(U)
        if res < threshold:
            return U, lam, res, it, True, False
        history.append(fidelity(S, U))
        w = opts.stagnation_window
        if len(history) > w:
            recent = np.asarray(history[-w - 1:])
            if np.abs(np.diff(recent)).max() < 1e-14 * max(1.0, abs(recent[-1])):
                return U, lam, res, it, False, True
    return U, lam, res, opts.max_iterations, False, False


def solve_ground(S: SuperOp, opts: SolverOptions = SolverOptions()) -> SolutionPair:
    """Highest-fidelity stationary map found by the eigen-iteration with restarts.

    The first attempt uses ``opts.initialization``; each of up to
    ``opts.restart_count`` restarts begins from a seeded random map. Returns
    the first converged result, otherwise the best feasible one with
    ``converged=False``.
    """
    if S.D > S.n:
        raise ValueError("solver needs D <= n")
    if opts.selection_rank >= S.size:
        raise ValueError("selection_rank must be below D*n")
    rng = np.random.default_rng(opts.seed)
    best = None
    total = 0
    for attempt in range(opts.restart_count + 1):
        try:
            U0 = _initial(S, opts, rng, attempt)
            U, lam, res, its, ok, stalled = run_iterations(S, U0, opts)
        except DegenerateIterateError as exc:
            log.debug("attempt %d degenerate: %s", attempt, exc)
            continue
        total += its
        if ok:
            lam = solve_dual(S, U)
            return SolutionPair(lam, U, float(np.trace(lam).real), residual(S, U, lam), total, True,
                                {"attempts": attempt + 1})
        f = fidelity(S, U)
        if best is None or f > best.fidelity:
            best = SolutionPair(lam, U, f, res, total, False, {"attempts": attempt + 1})
        log.debug("attempt %d ended (stalled=%s) at residual %.3e", attempt, stalled, res)
    if best is None:
        raise DegenerateIterateError("every attempt produced a degenerate iterate")
    best.iterations = total
    return best
