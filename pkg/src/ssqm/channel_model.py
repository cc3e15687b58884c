"""Kraus channels fitted to data, layered channel pipelines and expectation values."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .hierarchy import MixedUnitaryChannel
from .solver import SolverOptions, solve_ground
from .tensor_core import (
    MappingSample,
    SuperOp,
    build_superop_pure,
    check_density,
    fidelity,
    hermitian_part,
)

MAX_PRODUCT_DIM = 4096


@dataclass
class RawSample:
    """Classical observations ``x_l -> f_l`` with weights."""

    x: np.ndarray
    f: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x))
        self.f = np.atleast_2d(np.asarray(self.f))
        if len(self.x) != len(self.f) or len(self.x) == 0:
            raise ValueError("x and f need the same nonzero number of records")
        self.weights = np.ones(len(self.x)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.x),) or np.any(self.weights < 0):
            raise ValueError("weights must be M nonnegative reals")


@dataclass
class KrausSet:
    """Operators ``B_s`` of shape ``(D, n)``."""

    operators: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.operators = np.asarray(self.operators, dtype=complex)
        if self.operators.ndim == 2:
            self.operators = self.operators[None]
        if self.operators.ndim != 3:
            raise ValueError("Kraus operators must form an (N_s, D, n) array")

    @property
    def stack(self) -> np.ndarray:
        """Vertical stack of shape ``(N_s * D, n)``."""
        return self.operators.reshape(-1, self.operators.shape[2])

    @classmethod
    def from_stack(cls, stack: np.ndarray, D: int, **info) -> "KrausSet":
        return cls(np.asarray(stack).reshape(-1, D, stack.shape[1]), dict(info))


def _sample_frame(V: np.ndarray, w: np.ndarray, frame: str, tol: float) -> np.ndarray:
    """Coordinates of the Gram-normalized wavefunctions for the rows of ``V``."""
    G = (V.T * w) @ V.conj() / w.sum()
    G = hermitian_part(G)
    g, E = np.linalg.eigh(G)
    keep = g > tol * g.max()
    if not keep.any():
        raise ValueError("Gram matrix of the attributes is zero")
    # rows of C are coordinates G^{-1/2} v in the support of G
    C = (V @ E[:, keep].conj()) / np.sqrt(g[keep])
    norms = np.linalg.norm(C, axis=1)
    if np.any(norms <= tol * max(1.0, norms.max())):
        raise ValueError("a record has zero weight under the Gram metric")
    C = C / norms[:, None]
    if frame == "attribute":
        # back to attribute axes, i.e. the symmetric G^{-1/2} frame, when G is full rank
        return C @ E[:, keep].T if keep.all() else C
    if frame == "canonical":
        rho = (C.T * w) @ C.conj() / w.sum()
        r, R = np.linalg.eigh(hermitian_part(rho))
        Y = C @ R[:, ::-1].conj()
        # phase set by the record with the largest coefficient, a frame-free choice
        for k in range(Y.shape[1]):
            j = np.argmax(np.abs(Y[:, k]) - 1e-12 * np.arange(Y.shape[0]))
            Y[:, k] *= abs(Y[j, k]) / Y[j, k]
        return Y
    raise ValueError(f"unknown frame {frame!r}")


def embed_sample(raw: RawSample, frame: str = "attribute", tol: float = 1e-12) -> MappingSample:
    """Turn classical records into a pure mapping sample.

    Each record becomes the normalized wavefunction ``G^{-1} x_l / sqrt(x_l^H G^{-1} x_l)``
    over the attribute functions, where ``G`` is the weighted sample Gram matrix
    (inverted on its support, eigenvalues below ``tol * max`` dropped). The
    returned vectors are its coordinates in an orthonormal basis of that
    function space. ``frame="attribute"`` uses the symmetric ``G^{-1/2}``
    basis, which gives ``x_l / |x_l|`` when ``G = I``. ``frame="canonical"`` uses
    the eigenbasis of the averaged projector, which makes the output identical
    for any invertible linear change of attributes (nondegenerate spectrum).
    """
    psi = _sample_frame(np.asarray(raw.x, dtype=complex), raw.weights, frame, tol)
    phi = _sample_frame(np.asarray(raw.f, dtype=complex), raw.weights, frame, tol)
    return MappingSample("pure", psi=psi, phi=phi, weights=raw.weights)


def apply_kraus(B: KrausSet, rho: np.ndarray) -> np.ndarray:
    """``sum_s B_s rho B_s^H``."""
    rho = np.asarray(rho, dtype=complex)
    ops = B.operators
    return np.einsum("sij,jk,slk->il", ops, rho, ops.conj())


def kraus_fidelity(B: KrausSet, sample: MappingSample) -> float:
    """``sum_l w_l sum_s |<phi_l|B_s|psi_l>|^2``."""
    amps = np.einsum("lj,sjk,lk->ls", sample.phi.conj(), B.operators, sample.psi)
    return float(sample.weights @ (np.abs(amps) ** 2).sum(axis=1))


def kraus_constraint_residual(B: KrausSet) -> float:
    """``max |sum_s B_s^H B_s - I|``."""
    st = B.stack
    return float(np.abs(st.conj().T @ st - np.eye(st.shape[1])).max())


def expected_fidelity_pure(phi: np.ndarray, varrho: np.ndarray) -> float:
    """``<phi|varrho|phi>``."""
    phi = np.asarray(phi)
    return float(np.vdot(phi, np.asarray(varrho) @ phi).real)


def _stack_superop(S: SuperOp, count: int) -> SuperOp:
    """Superoperator on the transposed Kraus stack ``X = stack^T`` of shape ``(n, count * D)``."""
    D, n = S.D, S.n
    big = np.kron(np.eye(count), S.matrix)
    # vec(stack) index (s*D + j)*n + k  ->  vec(X) index k*(count*D) + s*D + j
    idx = np.arange(count * D * n)
    rows, k = divmod(idx, n)
    perm = k * (count * D) + rows
    out = np.empty_like(big)
    out[np.ix_(perm, perm)] = big
    return SuperOp(out, n, count * D)


def canonical_kraus(B: KrausSet) -> KrausSet:
    """Fix the mixing gauge ``B_s -> sum_t u_st B_t``.

    The operators are rotated to be mutually orthogonal in the Frobenius
    product, ordered by decreasing norm, with the largest-magnitude entry of
    each made real and positive. Fidelity and constraints are unchanged.
    """
    ops = B.operators
    Ns = ops.shape[0]
    K = ops.reshape(Ns, -1)
    g, W = np.linalg.eigh(hermitian_part(K @ K.conj().T))
    K = W[:, ::-1].conj().T @ K
    for s in range(Ns):
        j = np.argmax(np.abs(K[s]) - 1e-12 * np.arange(K.shape[1]))
        if abs(K[s, j]) > 0:
            K[s] *= abs(K[s, j]) / K[s, j]
    return KrausSet(K.reshape(ops.shape), dict(B.info))


def fit_kraus(sample: MappingSample, count: int, opts: SolverOptions = SolverOptions()) -> KrausSet:
    """Maximize the channel fidelity over Kraus sets with ``count`` operators.

    The stack of operators has orthonormal columns, so its transpose has
    orthonormal rows and the problem becomes a map-state problem for a
    block-diagonal superoperator that the ground solver handles. The result
    is reported in the gauge of :func:`canonical_kraus`.
    """
    if sample.mode != "pure":
        raise ValueError("fit_kraus needs a pure sample")
    D, n = sample.D, sample.n
    if count * D < n:
        raise ValueError(f"need count * D >= n, got {count} * {D} < {n}")
    S = build_superop_pure(sample)
    big = _stack_superop(S, count)
    if opts.initialization == "provided":
        opts = replace(opts, initial=np.asarray(opts.initial).reshape(-1, n).T)
    sol = solve_ground(big, opts)
    return canonical_kraus(KrausSet.from_stack(sol.U.T, D, fidelity=sol.fidelity, residual=sol.residual,
                                               converged=sol.converged, iterations=sol.iterations))


def tensor_combine(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product of density matrices in the given order."""
    if len(inputs) == 0:
        raise ValueError("need at least one input")
    dim = int(np.prod([np.asarray(r).shape[0] for r in inputs]))
    if dim > MAX_PRODUCT_DIM:
        raise ValueError(f"product dimension {dim} exceeds {MAX_PRODUCT_DIM}")
    out = np.ones((1, 1), dtype=complex)
    for r in inputs:
        out = np.kron(out, np.asarray(r, dtype=complex))
    return out


@dataclass
class PipelineNode:
    id: str
    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in ("kraus", "unitary", "product"):
            raise ValueError(f"unknown node kind {self.kind!r}")


@dataclass
class ChannelPipeline:
    """Directed acyclic graph of channel and product nodes.

    ``edges`` are ``(source, target)`` pairs. The inputs of a product node are
    combined in edge order.
    """

    nodes: list[PipelineNode]
    edges: list[tuple[str, str]]

    def order(self) -> list[str]:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        indeg = {i: 0 for i in ids}
        for a, b in self.edges:
            if a not in indeg or b not in indeg:
                raise ValueError(f"edge ({a}, {b}) refers to an unknown node")
            indeg[b] += 1
        ready = [i for i in ids if indeg[i] == 0]
        out = []
        while ready:
            i = ready.pop(0)
            out.append(i)
            for a, b in self.edges:
                if a == i:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
        if len(out) != len(ids):
            raise ValueError("pipeline contains a cycle")
        return out


def _apply_node(node: PipelineNode, rho: np.ndarray) -> np.ndarray:
    if node.kind == "kraus":
        B = node.payload if isinstance(node.payload, KrausSet) else KrausSet(node.payload)
        if B.operators.shape[2] != rho.shape[0]:
            raise ValueError(f"node {node.id}: input dimension {rho.shape[0]} does not match {B.operators.shape[2]}")
        return apply_kraus(B, rho)
    U = np.asarray(node.payload, dtype=complex)
    if U.shape[1] != rho.shape[0]:
        raise ValueError(f"node {node.id}: input dimension {rho.shape[0]} does not match {U.shape[1]}")
    return U @ rho @ U.conj().T


def evaluate_pipeline(p: ChannelPipeline, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate nodes in topological order and return the sink's density matrix.

    A source node receives ``inputs[id]``; product nodes may also take inputs
    directly. Exactly one node may have no outgoing edges.
    """
    order = p.order()
    nodes = {n.id: n for n in p.nodes}
    parents = {i: [a for a, b in p.edges if b == i] for i in order}
    sinks = [i for i in order if not any(a == i for a, _ in p.edges)]
    if len(sinks) != 1:
        raise ValueError("pipeline needs exactly one sink")
    values: dict[str, np.ndarray] = {}
    for i in order:
        incoming = [values[a] for a in parents[i]]
        if i in inputs:
            incoming.append(check_density(inputs[i]))
        if not incoming:
            raise ValueError(f"node {i} has no input")
        node = nodes[i]
        if node.kind == "product":
            values[i] = tensor_combine(incoming)
        else:
            if len(incoming) != 1:
                raise ValueError(f"channel node {i} needs exactly one input")
            values[i] = _apply_node(node, incoming[0])
    return values[sinks[0]]


def expectation(R: SuperOp, state) -> float:
    """``<U|R|U>`` for a map, or the weighted sum over a mixed-unitary channel."""
    if isinstance(state, MixedUnitaryChannel):
        return float(sum(p * fidelity(R, U) for p, U in zip(state.weights, state.unitaries)))
    return fidelity(R, state)
