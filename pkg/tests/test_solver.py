import numpy as np
import pytest

from helpers import phase_aligned_distance, random_hermitian, random_superop, recovery_instance
from ssqm.canonical import to_canonical
from ssqm.solver import (
    DegenerateIterateError,
    InfeasibleConstraintsError,
    LinearConstraintSet,
    SolverOptions,
    adjust_to_unitary,
    dual_objective,
    estimate_lambda,
    iterate_once,
    linearized_constraints,
    newton_polish,
    random_map,
    residual,
    retract,
    solve_dual,
    solve_ground,
)
from ssqm.tensor_core import SuperOp, build_superop_two_hamiltonian, fidelity, gram, gram_deviation, vectorize


def test_adjust_to_unitary_examples(rng):
    U = random_map(3, 3, rng)
    assert np.abs(adjust_to_unitary(U) - U).max() < 1e-12
    assert np.allclose(adjust_to_unitary(2 * np.eye(2)), np.eye(2))
    W = rng.normal(size=(2, 4)) + 1j * rng.normal(size=(2, 4))
    assert np.abs(gram(adjust_to_unitary(W)) - np.eye(2)).max() < 1e-12


def test_adjust_to_unitary_degenerate():
    with pytest.raises(DegenerateIterateError):
        adjust_to_unitary(np.array([[1, 0, 0], [1, 0, 0]]))


def test_linearized_constraints_counts():
    assert len(linearized_constraints(np.array([[0.6, 0.8]]))) == 0
    c = linearized_constraints(np.eye(2))
    assert np.allclose(c.evaluate(np.eye(2)), 0)
    U = random_map(2, 3, np.random.default_rng(1))
    c = linearized_constraints(U)
    assert len(c) == 4 and c.rank() == 4
    assert len(linearized_constraints(U, gauge=False)) == 3


def test_linearized_constraints_are_gram_variations(rng):
    D, n = 3, 5
    U = random_map(D, n, rng)
    W = rng.normal(size=(D, n)) + 1j * rng.normal(size=(D, n))
    vals = linearized_constraints(U, gauge=False).evaluate(W).real
    dG = W @ U.conj().T + U @ W.conj().T
    expected = []
    for i in range(D):
        for j in range(i + 1, D):
            expected += [dG[i, j].real, dG[i, j].imag]
    expected += [(dG[i, i] - dG[0, 0]).real / 2 for i in range(1, D)]
    assert np.allclose(vals, expected)


def test_retract_keeps_linear_rows(rng):
    D, n = 2, 4
    rows = np.array([vectorize(rng.normal(size=(D, n)) + 1j * rng.normal(size=(D, n)))])
    U = retract(rng.normal(size=(D, n)) + 1j * rng.normal(size=(D, n)), rows)
    assert gram_deviation(U) < 1e-12
    assert abs(np.vdot(rows[0], vectorize(U))) < 1e-12 * np.linalg.norm(rows[0])


def test_iterate_once_fixed_point_on_recovery():
    S, U, _ = recovery_instance(3, seed=4)
    out = iterate_once(S, U)
    assert phase_aligned_distance(out, U) < 1e-9


def test_iterate_once_d1_is_top_eigenvector(rng):
    H = random_hermitian(6, rng)
    w, V = np.linalg.eigh(H)
    out = iterate_once(SuperOp(H, 1, 6), random_map(1, 6, rng))
    assert phase_aligned_distance(out[0], V[:, -1]) < 1e-10


def test_iterate_once_single_hamiltonian_keeps_fidelity(rng):
    lam = random_hermitian(3, rng)
    S = build_superop_two_hamiltonian(lam, np.zeros((3, 3)))
    for _ in range(5):
        U = random_map(3, 3, rng)
        assert fidelity(S, iterate_once(S, U)) == pytest.approx(np.trace(lam).real, abs=1e-10)


@pytest.mark.parametrize("D, n", [(1, 4), (2, 2), (2, 5), (3, 4)])
def test_real_doubled_mode_agrees(D, n, rng):
    S = random_superop(D, n, rng)
    U = random_map(D, n, rng)
    a = iterate_once(S, U, opts=SolverOptions())
    b = iterate_once(S, U, opts=SolverOptions(real_doubled=True))
    assert phase_aligned_distance(a, b) < 1e-8


def test_iterate_once_empty_subspace():
    S = SuperOp(np.eye(1), 1, 1)
    cons = LinearConstraintSet(1).with_complex([np.ones(1)])
    with pytest.raises(InfeasibleConstraintsError):
        iterate_once(S, np.ones((1, 1)), cons)


@pytest.mark.parametrize("n", [1, 3, 7, 12])
def test_solve_ground_d1_matches_eigensolver(n, rng):
    H = random_hermitian(n, rng)
    w, V = np.linalg.eigh(H)
    sol = solve_ground(SuperOp(H, 1, n))
    assert sol.converged
    assert sol.fidelity == pytest.approx(w[-1], abs=1e-10)
    assert phase_aligned_distance(sol.U[0], V[:, -1]) < 1e-8


@pytest.mark.parametrize("n", [2, 3, 4])
def test_solve_ground_recovery_from_random_start(n):
    S, U, sample = recovery_instance(n, seed=10 + n)
    sol = solve_ground(S, SolverOptions(initialization="random", seed=n))
    assert sol.converged
    assert sol.fidelity == pytest.approx(sample.M, abs=1e-6 * sample.M)
    assert phase_aligned_distance(sol.U, U) < 1e-6


def test_solve_ground_two_hamiltonian_degenerate(rng):
    S = build_superop_two_hamiltonian(np.diag([2.0, 1.0]), np.zeros((2, 2)))
    sol = solve_ground(S)
    assert sol.fidelity == pytest.approx(3.0)
    # exhaustive check over a grid of 2x2 unitaries
    best = -np.inf
    for a in np.linspace(0, np.pi, 7):
        for b in np.linspace(0, 2 * np.pi, 7):
            for c in np.linspace(0, 2 * np.pi, 7):
                U = np.array([[np.cos(a), -np.exp(1j * c) * np.sin(a)],
                              [np.exp(1j * b) * np.sin(a), np.exp(1j * (b + c)) * np.cos(a)]])
                best = max(best, fidelity(S, U))
    assert best == pytest.approx(3.0)


@pytest.mark.parametrize("D, n", [(2, 2), (2, 5), (3, 3), (3, 7), (4, 4)])
def test_solve_ground_random(D, n, rng):
    S = random_superop(D, n, rng)
    sol = solve_ground(S, SolverOptions(seed=1))
    assert sol.converged
    assert sol.residual < 1e-10 * S.norm()
    assert gram_deviation(sol.U) < 1e-9
    assert np.trace(sol.lam).real == pytest.approx(sol.fidelity, abs=1e-10)


def test_solve_ground_is_deterministic(rng):
    S = random_superop(2, 3, rng)
    a = solve_ground(S, SolverOptions(seed=5, initialization="random"))
    b = solve_ground(S, SolverOptions(seed=5, initialization="random"))
    assert np.array_equal(a.U, b.U)


def test_solve_ground_flags_non_convergence(rng):
    S = random_superop(3, 3, rng)
    sol = solve_ground(S, SolverOptions(max_iterations=1, restart_count=1, initialization="random"))
    assert not sol.converged
    assert gram_deviation(sol.U) < 1e-9


def test_global_phase_gauge(rng):
    S = random_superop(2, 3, rng)
    sol = solve_ground(S)
    V = np.exp(1j * np.pi / 3) * sol.U
    assert np.allclose(estimate_lambda(S, V), estimate_lambda(S, sol.U), atol=1e-12)
    assert fidelity(S, V) == pytest.approx(sol.fidelity, abs=1e-12)
    assert residual(S, V, sol.lam) == pytest.approx(residual(S, sol.U, sol.lam), abs=1e-12)


def test_right_diagonal_phases_break_stationarity(rng):
    S = random_superop(3, 3, rng)
    S_c, sol_c, _ = to_canonical(S, solve_ground(S))
    Udiag = np.diag(np.exp(1j * rng.uniform(0, 2 * np.pi, 3)))
    V = sol_c.U @ Udiag
    assert residual(S_c, V, estimate_lambda(S_c, V)) > 1e-3


def test_estimate_lambda(rng):
    H = random_hermitian(5, rng)
    psi = random_map(1, 5, rng)
    assert estimate_lambda(SuperOp(H, 1, 5), psi)[0, 0] == pytest.approx(np.vdot(psi[0], H @ psi[0]).real)
    S = random_superop(3, 4, rng)
    for _ in range(10):
        U = random_map(3, 4, rng)
        lam = estimate_lambda(S, U)
        assert np.allclose(lam, lam.conj().T)
        assert np.trace(lam).real == pytest.approx(fidelity(S, U), abs=1e-12)


def _dual_oracle(S, U):
    """Least squares over the D^2 real parameters of lam."""
    D = U.shape[0]
    iu = np.triu_indices(D, 1)

    def unpack(x):
        lam = np.diag(x[:D]).astype(complex)
        k = len(iu[0])
        lam[iu] = x[D:D + k] + 1j * x[D + k:]
        lam[(iu[1], iu[0])] = x[D:D + k] - 1j * x[D + k:]
        return lam

    def resid(x):
        r = S.apply(U) - unpack(x) @ U
        return np.concatenate([r.real.ravel(), r.imag.ravel()])

    # the residual is affine in x: probe it column by column
    r0 = resid(np.zeros(D * D))
    A = np.column_stack([resid(e) - r0 for e in np.eye(D * D)])
    x = np.linalg.lstsq(A, -r0, rcond=None)[0]
    return unpack(x)


def test_solve_dual_matches_generic_least_squares(rng):
    S = random_superop(3, 4, rng)
    U = random_map(3, 4, rng)
    assert np.abs(solve_dual(S, U) - _dual_oracle(S, U)).max() < 1e-8
    # for feasible U the minimizer is the Hermitian part of (S U) U^H
    assert np.abs(solve_dual(S, U) - estimate_lambda(S, U)).max() < 1e-10


def test_solve_dual_stationary_and_perturbed(rng):
    S = random_superop(2, 3, rng)
    sol = solve_ground(S)
    lam = solve_dual(S, sol.U)
    assert np.abs(lam - estimate_lambda(S, sol.U)).max() < 1e-10
    assert dual_objective(S, sol.U) < 1e-16 * S.norm() ** 2
    assert dual_objective(S, random_map(2, 3, rng)) > 1e-6


def test_solve_dual_d1(rng):
    H = random_hermitian(4, rng)
    psi = random_map(1, 4, rng)
    assert solve_dual(SuperOp(H, 1, 4), psi)[0, 0] == pytest.approx(np.vdot(psi[0], H @ psi[0]).real)


def test_residual_examples(rng):
    S = random_superop(2, 2, rng)
    U = random_map(2, 2, rng)
    assert residual(S, U, np.zeros((2, 2))) == pytest.approx(np.linalg.norm(S.matrix @ vectorize(U)))
    sol = solve_ground(S)
    E = rng.normal(size=(2, 2))
    slopes = [residual(S, sol.U + eps * E, sol.lam) / eps for eps in (1e-3, 1e-4, 1e-5)]
    assert max(slopes) / min(slopes) < 1.01


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tol_residual=0)
    with pytest.raises(ValueError):
        SolverOptions(initialization="provided")
    with pytest.raises(ValueError):
        solve_ground(SuperOp(np.eye(4), 2, 2), SolverOptions(selection_rank=4))


def test_autocorrelation_recovers_generator(rng):
    from helpers import random_density
    from ssqm.tensor_core import build_superop_autocorr

    U = random_map(3, 3, rng)
    traj = [random_density(3, rng)]
    for _ in range(12):
        traj.append(U @ traj[-1] @ U.conj().T)
    S = build_superop_autocorr(traj)
    sol = solve_ground(S, SolverOptions(initialization="random", seed=2))
    assert sol.converged
    assert sol.fidelity == pytest.approx(12.0, abs=1e-8)
    assert phase_aligned_distance(sol.U, U) < 1e-6


def test_newton_polish_returns_to_stationary_point(rng):
    S = random_superop(3, 3, rng)
    sol = solve_ground(S)
    E = 1e-3 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    U, lam, res = newton_polish(S, adjust_to_unitary(sol.U + E), sol.lam)
    assert res < 1e-12 * S.norm()
    assert gram_deviation(U) < 1e-12
    assert phase_aligned_distance(U, sol.U) < 1e-8


def test_newton_polish_reaches_saddle(rng):
    # D=1: every eigenvector is stationary, not just the top one
    H = random_hermitian(5, rng)
    w, V = np.linalg.eigh(H)
    psi = adjust_to_unitary((V[:, 2] + 1e-3 * rng.normal(size=5))[None])
    U, lam, res = newton_polish(SuperOp(H, 1, 5), psi, np.array([[w[2] + 0.01]]))
    assert res < 1e-12
    assert lam[0, 0].real == pytest.approx(w[2], abs=1e-12)
