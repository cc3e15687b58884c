"""Random instances shared by the tests."""
import numpy as np

from ssqm.solver import random_map
from ssqm.tensor_core import MappingSample, SuperOp, build_superop_pure


def random_state(n, rng):
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    return v / np.linalg.norm(v)


def random_hermitian(n, rng):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (A + A.conj().T) / 2


def random_density(n, rng, rank=None):
    A = rng.normal(size=(n, rank or n)) + 1j * rng.normal(size=(n, rank or n))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real


def random_superop(D, n, rng):
    return SuperOp(random_hermitian(D * n, rng), D, n)


def recovery_instance(n, seed, M=None):
    """Pure sample of ``M = 3 n^2`` pairs mapped by a random unitary."""
    rng = np.random.default_rng(seed)
    U = random_map(n, n, rng)
    M = M or 3 * n * n
    psi = np.array([random_state(n, rng) for _ in range(M)])
    sample = MappingSample("pure", psi=psi, phi=psi @ U.T)
    return build_superop_pure(sample), U, sample


def random_pure_sample(D, n, M, rng):
    psi = np.array([random_state(n, rng) for _ in range(M)])
    phi = np.array([random_state(D, rng) for _ in range(M)])
    return MappingSample("pure", psi=psi, phi=phi, weights=rng.uniform(0.5, 2.0, size=M))


def phase_aligned_distance(U, V):
    """``min_xi max|U - e^{i xi} V|`` using the optimal overlap phase."""
    ov = np.vdot(V.reshape(-1), U.reshape(-1))
    ph = ov / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.abs(U - ph * V).max())
