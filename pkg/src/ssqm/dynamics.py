"""Time evolution of map states under the candidate dynamic equations.

All equations use ``hbar`` (default 1):

* linear: ``i hbar dU/dt = S U``
* nonlinear: ``i hbar dU/dt = <U|S|U> U``
* GPE-type: ``i hbar dU/dt = a S U + b <U|S|U> U``
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .canonical import BasisPair, transform_map
from .solver import adjust_to_unitary
from .tensor_core import (
    SuperOp,
    crank_nicolson_step,
    devectorize,
    fidelity,
    gram_deviation,
    is_hermitian,
    unitary_from_hamiltonian,
    vectorize,
)

RETRACT_DRIFT = 1e-9


@dataclass
class EvolutionReport:
    """Sampled trajectory; ``times`` are strictly increasing."""

    integrator: str
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    fidelities: list[float] = field(default_factory=list)
    gram_deviations: list[float] = field(default_factory=list)

    def record(self, t: float, U: np.ndarray, S: SuperOp | None = None):
        self.times.append(float(t))
        self.states.append(np.array(U))
        self.fidelities.append(fidelity(S, U) if S is not None else float("nan"))
        self.gram_deviations.append(gram_deviation(U))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class GateSequence2D:
    """Paired left (D x D) and right (n x n) unitary gates applied step by step."""

    horizontal: Sequence[np.ndarray]
    vertical: Sequence[np.ndarray]

    def __post_init__(self):
        if len(self.horizontal) != len(self.vertical) or len(self.horizontal) == 0:
            raise ValueError("gate sequences must be nonempty and of equal length")
        for G in list(self.horizontal) + list(self.vertical):
            G = np.asarray(G)
            if G.ndim != 2 or G.shape[0] != G.shape[1] or gram_deviation(G) > 1e-12:
                raise ValueError("every gate must be a unitary matrix")

    def steps(self):
        for A, B in zip(self.horizontal, self.vertical):
            yield BasisPair(A, B)


def evolve_linear(S: SuperOp, U0: np.ndarray, t: float, steps: int = 1, hbar: float = 1.0,
                  method: str = "spectral") -> EvolutionReport:
    """Linear evolution ``vec U(t) = exp(-i t S / hbar) vec U0`` sampled at ``steps + 1`` times.

    ``method="spectral"`` is exact for any ``t``; ``"crank-nicolson"`` uses one
    Cayley step per sample interval. The Gram deviation is reported because the
    flow generally leaves the feasible set.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    U0 = np.asarray(U0, dtype=complex)
    times = np.linspace(0.0, t, steps + 1)
    report = EvolutionReport("exact-spectral" if method == "spectral" else "crank-nicolson")
    u0 = vectorize(U0)
    if method == "spectral":
        w, V = np.linalg.eigh(S.matrix)
        c = V.conj().T @ u0
        for tk in times:
            report.record(tk, devectorize(V @ (np.exp(-1j * tk / hbar * w) * c), S.D, S.n), S)
    elif method == "crank-nicolson":
        P = crank_nicolson_step(S.matrix, times[1] - times[0], hbar)
        u = u0
        report.record(0.0, U0, S)
        for tk in times[1:]:
            u = P @ u
            report.record(tk, devectorize(u, S.D, S.n), S)
    else:
        raise ValueError(f"unknown method {method!r}")
    return report


def _rk4(rhs, U, dt):
    k1 = rhs(U)
    k2 = rhs(U + dt / 2 * k1)
    k3 = rhs(U + dt / 2 * k2)
    k4 = rhs(U + dt * k3)
    return U + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate(S, U0, t, dt, rhs, retract_drift, sample_every, label):
    if dt <= 0:
        raise ValueError("dt must be positive")
    nsteps = int(round(t / dt))
    if nsteps < 1 or abs(nsteps * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError("t must be a positive integer multiple of dt")
    U = np.asarray(U0, dtype=complex)
    report = EvolutionReport(label)
    report.record(0.0, U, S)
    for k in range(1, nsteps + 1):
        U = _rk4(rhs, U, dt)
        if retract_drift and gram_deviation(U) > RETRACT_DRIFT:
            U = adjust_to_unitary(U)
        if k % sample_every == 0 or k == nsteps:
            report.record(k * dt, U, S)
    return report


def evolve_nonlinear(S: SuperOp, U0: np.ndarray, t: float, dt: float, hbar: float = 1.0,
                     retract_drift: bool = True, sample_every: int = 1) -> EvolutionReport:
    """RK4 integration of ``i hbar dU/dt = <U|S|U> U``.

    The exact flow is ``exp(-i t F / hbar) U0`` with the conserved ``F``. When
    the Gram deviation exceeds 1e-9 the iterate is pulled back by ``G^{-1/2}``.
    """
    U0 = np.asarray(U0, dtype=complex)
    if gram_deviation(U0) > 1e-9:
        raise ValueError("initial map must be feasible")

    def rhs(U):
        return -1j / hbar * np.vdot(vectorize(U), S.matrix @ vectorize(U)).real * U

    return _integrate(S, U0, t, dt, rhs, retract_drift, sample_every, "rk4")


def evolve_gpe(S: SuperOp, U0: np.ndarray, a: float, b: float, t: float, dt: float, hbar: float = 1.0,
               sample_every: int = 1) -> EvolutionReport:
    """RK4 integration of ``i hbar dU/dt = a S U + b <U|S|U> U``.

    Retraction is used only for ``a == 0``, where the exact flow keeps the rows
    orthonormal; otherwise the drift belongs to the dynamics and is reported.
    """
    U0 = np.asarray(U0, dtype=complex)
    if gram_deviation(U0) > 1e-9:
        raise ValueError("initial map must be feasible")

    def rhs(U):
        SU = S.apply(U)
        return -1j / hbar * (a * SU + b * np.vdot(vectorize(U), vectorize(SU)).real * U)

    return _integrate(S, U0, t, dt, rhs, a == 0, sample_every, "rk4")


def evolve_two_hamiltonian(lam: np.ndarray, nu: np.ndarray, U0: np.ndarray, t: float, hbar: float = 1.0) -> np.ndarray:
    """Closed form ``exp(-i t lam / hbar) U0 exp(-i t nu / hbar)``."""
    if not (is_hermitian(np.asarray(lam)) and is_hermitian(np.asarray(nu))):
        raise ValueError("lam and nu must be Hermitian")
    return unitary_from_hamiltonian(lam, t, hbar) @ np.asarray(U0) @ unitary_from_hamiltonian(nu, t, hbar)


def apply_gate_step(U: np.ndarray, gates: BasisPair) -> np.ndarray:
    """One gate step ``A U B^H``."""
    U = np.asarray(U)
    if gates.left.shape[0] != U.shape[0] or gates.right.shape[0] != U.shape[1]:
        raise ValueError("gate dimensions do not match the map")
    return transform_map(U, gates)


def run_sequence_2d(U0: np.ndarray, seq: GateSequence2D, S: SuperOp | None = None) -> EvolutionReport:
    """Apply a sequence of gate pairs left to right and record every step."""
    U = np.asarray(U0, dtype=complex)
    report = EvolutionReport("gates")
    report.record(0, U, S)
    for k, gates in enumerate(seq.steps(), start=1):
        U = apply_gate_step(U, gates)
        report.record(k, U, S)
    return report
