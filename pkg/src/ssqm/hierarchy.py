"""Successive solutions under orthogonality constraints and what they are used for."""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .solver import (
    DegenerateIterateError,
    InfeasibleConstraintsError,
    SolverOptions,
    constrained_multipliers,
    estimate_lambda,
    newton_polish,
    random_map,
    residual,
    retract,
    run_iterations,
    solve_ground,
)
from .tensor_core import SolutionPair, SuperOp, fidelity, fidelity_matrix, vectorize

log = logging.getLogger(__name__)

# overlap |<U, U_prev>| / D above which a FULL iterate is deflated
FULL_OVERLAP_LIMIT = 0.99
FULL_PUSH_ITERATIONS = 10


class Orthogonality(str, enum.Enum):
    """How a new solution is kept apart from earlier ones.

    PLAIN: ``<U'|U> = 0``. LAMBDA_PREV: ``<U'|lam' U> = 0``. USU: ``<U'|S|U> = 0``.
    FULL: ``<(lam' - lam) U'|U> = 0`` with ``lam`` the current iterate's multipliers.
    """

    PLAIN = "plain"
    LAMBDA_PREV = "lambda"
    USU = "usu"
    FULL = "full"


@dataclass
class Hierarchy:
    solutions: list[SolutionPair]
    orthogonality: Orthogonality
    superop: SuperOp

    @property
    def states(self) -> list[np.ndarray]:
        return [s.U for s in self.solutions]

    @property
    def fidelities(self) -> np.ndarray:
        return np.array([s.fidelity for s in self.solutions])

    @property
    def converged(self) -> np.ndarray:
        return np.array([s.converged for s in self.solutions])


@dataclass
class MixedUnitaryChannel:
    """Convex combination ``A -> sum_s P_s U_s A U_s^H``."""

    weights: np.ndarray
    unitaries: list[np.ndarray]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.unitaries = [np.asarray(U, dtype=complex) for U in self.unitaries]
        if len(self.weights) != len(self.unitaries) or len(self.weights) == 0:
            raise ValueError("need one weight per unitary")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")


def _prior_rows(S: SuperOp, prev: Sequence[SolutionPair], kind: Orthogonality, lam=None) -> np.ndarray:
    rows = []
    for p in prev:
        if kind is Orthogonality.PLAIN:
            c = p.U
        elif kind is Orthogonality.LAMBDA_PREV:
            c = p.lam @ p.U
        elif kind is Orthogonality.USU:
            c = S.apply(p.U)
        else:
            c = (p.lam - lam) @ p.U
        rows.append(vectorize(c))
    return np.array(rows, dtype=complex).reshape(-1, S.size)


class _FullRows:
    """Constraint rows for FULL orthogonality, with PLAIN deflation near old solutions."""

    def __init__(self, S, prev):
        self.S = S
        self.prev = prev
        self.push_left = 0
        self.pushes = 0

    def __call__(self, U):
        lam = estimate_lambda(self.S, U)
        rows = _prior_rows(self.S, self.prev, Orthogonality.FULL, lam)
        D = U.shape[0]
        overlap = max(abs(np.vdot(vectorize(p.U), vectorize(U))) / D for p in self.prev)
        # the push needs spare real dimensions beyond the D^2 tangent rows
        room = 2 * U.size - D * D - 2 * (len(rows) + len(self.prev)) >= 1
        if room and overlap > FULL_OVERLAP_LIMIT and self.push_left <= 0:
            self.push_left = FULL_PUSH_ITERATIONS
            self.pushes += 1
        if self.push_left > 0:
            self.push_left -= 1
            rows = np.vstack([rows, _prior_rows(self.S, self.prev, Orthogonality.PLAIN)])
        norms = np.linalg.norm(rows, axis=1)
        return rows[norms > 1e-12 * max(1.0, norms.max(initial=0.0))]


def _polish_full(S, prev, U, lam, res, threshold):
    """Newton-refine a stalled FULL run; keep the result only if it is a new stationary point."""
    try:
        V, mu, r = newton_polish(S, U, lam)
    except DegenerateIterateError:
        return U, lam, res, False
    D = U.shape[0]
    overlap = max(abs(np.vdot(p.U, V)) / D for p in prev)
    if r < threshold and overlap < FULL_OVERLAP_LIMIT:
        return V, mu, r, True
    return U, lam, res, False


def _solve_next(S: SuperOp, prev: list[SolutionPair], kind: Orthogonality, opts: SolverOptions, index: int,
                min_attempts: int) -> SolutionPair:
    rng = np.random.default_rng([opts.seed, index])
    best = None
    total = 0
    for attempt in range(max(opts.restart_count + 1, min_attempts)):
        U0 = random_map(S.D, S.n, rng)
        if kind is Orthogonality.FULL:
            rows_for = _FullRows(S, prev)

            def measure(V):
                lam = estimate_lambda(S, V)
                return lam, residual(S, V, lam)
        else:
            fixed = _prior_rows(S, prev, kind)

            def rows_for(_V, fixed=fixed):
                return fixed

            def measure(V, fixed=fixed):
                lam, _, res = constrained_multipliers(S, V, fixed)
                return lam, res
        try:
            if kind is not Orthogonality.FULL:
                U0 = retract(U0, fixed)
            U, lam, res, its, ok, _ = run_iterations(S, U0, opts, rows_for, measure,
                                                     exact_rows=True)
        except DegenerateIterateError as exc:
            log.debug("solution %d attempt %d degenerate: %s", index, attempt, exc)
            continue
        total += its
        polished = False
        if kind is Orthogonality.FULL and not ok:
            U, lam, res, polished = _polish_full(S, prev, U, lam, res, opts.threshold(S))
            ok = polished
        pair = SolutionPair(lam, U, fidelity(S, U), res, total, ok,
                            {"attempts": attempt + 1, "plain_residual": residual(S, U, estimate_lambda(S, U)),
                             "polished": polished})
        # converged beats unconverged, then higher fidelity wins
        if best is None or (pair.converged, pair.fidelity) > (best.converged, best.fidelity):
            best = pair
        if ok and attempt + 1 >= min_attempts:
            break
    if best is None:
        raise DegenerateIterateError(f"solution {index}: every attempt was degenerate")
    best.iterations = total
    return best


def solve_hierarchy(S: SuperOp, count: int, orthogonality: Orthogonality | str = Orthogonality.USU,
                    opts: SolverOptions = SolverOptions(), starts: int = 3) -> Hierarchy:
    """Build ``count`` solutions, each constrained against all earlier ones.

    Solution 0 is :func:`~ssqm.solver.solve_ground`. Later solutions start from
    seeded random maps that already satisfy the linear constraints; the best of
    ``starts`` converged runs is kept, and failed runs are retried up to
    ``opts.restart_count + 1`` attempts in total. For every
    type except FULL the reported residual is the stationarity residual of the
    constrained problem, ``||S U - lam U - sum_h alpha_h C_h||``, and ``lam`` is
    the matching multiplier matrix. FULL uses the unconstrained residual.
    Non-converged solutions are kept with ``converged=False``. Raises
    :class:`~ssqm.solver.InfeasibleConstraintsError` when ``2 (count - 1)``
    exceeds the ``2 D n - D^2 - 1`` real dimensions of the feasible set, so a
    complete basis of ``D n`` maps is only reachable for ``D = 1``.
    """
    kind = Orthogonality(orthogonality)
    if count < 1 or count > S.size:
        raise ValueError(f"count must be in [1, {S.size}]")
    # each earlier solution removes two real dimensions from the feasible set,
    # which has 2 D n - D^2 - 1 of them once the global phase is ignored
    if 2 * (count - 1) > 2 * S.size - S.D ** 2 - 1:
        raise InfeasibleConstraintsError(f"{count} solutions over-constrain maps of shape ({S.D}, {S.n})")
    if S.D == S.n == 10 and count > 7:
        warnings.warn("hierarchies deeper than 7 at D=n=10 are often unreliable", RuntimeWarning)
    solutions = [solve_ground(S, opts)]
    for s in range(1, count):
        solutions.append(_solve_next(S, solutions, kind, opts, s, starts))
        log.info("solution#=%d residual=%.3e fidelity=%.12g converged=%s", s, solutions[-1].residual,
                 solutions[-1].fidelity, solutions[-1].converged)
    return Hierarchy(solutions, kind, S)


def solve_by_mu_selection(S: SuperOp, rank: int, opts: SolverOptions = SolverOptions()) -> SolutionPair:
    """Ground-style solve that follows the ``rank + 1``-th largest subspace eigenvalue."""
    if rank >= S.size:
        raise ValueError("rank must be below D*n")
    if rank > 0 and opts.initialization == "spectral":
        # the spectral start is already stationary, so it would never move
        opts = replace(opts, initialization="random")
    return solve_ground(S, replace(opts, selection_rank=rank))


def _positive_diagonal(h: Hierarchy) -> np.ndarray:
    F = fidelity_matrix(h.superop, h.states)
    d = np.diag(F).real
    if np.any(d <= 0):
        raise ValueError("every diagonal fidelity must be positive")
    return F


def expand_superop(h: Hierarchy) -> SuperOp:
    """Rebuild ``S`` from a USU hierarchy as ``sum_s |S U_s><U_s S| / F_ss``."""
    S = h.superop
    F = _positive_diagonal(h)
    X = np.array([S.matrix @ vectorize(U) for U in h.states]).T
    M = (X / np.diag(F).real) @ X.conj().T
    return SuperOp((M + M.conj().T) / 2, S.D, S.n)


def decompose_map(V: np.ndarray, h: Hierarchy) -> np.ndarray:
    """Expansion weights ``w_s = <U_s|S|V> / F_ss`` over a USU hierarchy.

    With a complete basis ``V = sum_s w_s U_s`` and
    ``<V|S|V> = sum_s |w_s|^2 F_ss``.
    """
    S = h.superop
    F = _positive_diagonal(h)
    v = vectorize(np.asarray(V, dtype=complex))
    return np.array([np.vdot(S.matrix @ vectorize(U), v) for U in h.states]) / np.diag(F).real


def mixed_unitary_apply(channel: MixedUnitaryChannel, A: np.ndarray) -> np.ndarray:
    """Apply a mixed-unitary channel to a density matrix."""
    A = np.asarray(A, dtype=complex)
    return sum(p * U @ A @ U.conj().T for p, U in zip(channel.weights, channel.unitaries))


def density_of_states(h: Hierarchy, bin_edges: Sequence[float], include_unconverged: bool = False) -> np.ndarray:
    """Count solution fidelities in bins ``[e_i, e_{i+1})``; the last bin also holds its right edge."""
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    keep = np.ones(len(h.solutions), bool) if include_unconverged else h.converged
    f = h.fidelities[keep]
    idx = np.searchsorted(edges, f, side="right") - 1
    idx[f == edges[-1]] = len(edges) - 2
    counts = np.zeros(len(edges) - 1, dtype=int)
    np.add.at(counts, idx[(idx >= 0) & (idx < len(counts))], 1)
    return counts
