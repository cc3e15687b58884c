"""Command-line interface.

Exit codes: 0 success, 1 unreadable or malformed input, 2 infeasible
configuration, 3 non-convergence (best-effort output is still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .canonical import to_canonical
from .channel_model import (
    KrausSet,
    embed_sample,
    evaluate_pipeline,
    fit_kraus,
    kraus_constraint_residual,
    kraus_fidelity,
)
from .dynamics import evolve_gpe, evolve_linear, evolve_nonlinear, run_sequence_2d
from .hierarchy import density_of_states, solve_hierarchy
from .solver import DegenerateIterateError, InfeasibleConstraintsError, SolverOptions, random_map, solve_ground
from .tensor_core import (
    MappingSample,
    SuperOp,
    build_superop_mixed_unitary,
    build_superop_pure,
    build_superop_two_hamiltonian,
)

EXIT_FILE, EXIT_INFEASIBLE, EXIT_NOT_CONVERGED = 1, 2, 3

log = logging.getLogger("ssqm")


class InputError(Exception):
    """Raised for unreadable or malformed input files."""


def _load(path, parser):
    try:
        return parser(io.read_json(path))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _superop_from_obj(obj) -> SuperOp:
    if "matrix" in obj:
        return io.superop_from_json(obj)
    sample = io.sample_from_json(obj)
    return build_superop_pure(sample) if sample.mode == "pure" else build_superop_mixed_unitary(sample)


def _options(args) -> SolverOptions:
    return SolverOptions(tol_residual=args.tol, max_iterations=args.max_iter, seed=args.seed,
                         selection_rank=args.selection_rank, restart_count=args.restarts)


def _log_line(s: int, sol) -> str:
    return f"solution#={s}  fdiffSK={sol.residual!r}  Tr lambda{s}={sol.fidelity!r}  flagOK={str(sol.converged).lower()}"


def _emit(args, payload: dict, lines: list[str]):
    if args.format == "json":
        print(json.dumps(payload, indent=1))
    else:
        for line in lines:
            print(line)


def _random_state(n, rng):
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    return v / np.linalg.norm(v)


def _random_density(n, rng):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real


def _random_hermitian(n, rng):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (A + A.conj().T) / 2


def cmd_gen(args) -> int:
    D, n = args.D, args.n
    if D < 1 or n < 1 or D > n or args.M < 1:
        raise ValueError("need 1 <= D <= n and M >= 1")
    rng = np.random.default_rng(args.seed)
    prefix = args.out
    written = []
    if args.kind == "pure-unitary":
        U = random_map(D, n, rng)
        psi = np.array([_random_state(n, rng) for _ in range(args.M)])
        phi = psi @ U.T
        # rows of a partial map shrink the norm; normalize the targets
        phi = phi / np.linalg.norm(phi, axis=1, keepdims=True)
        sample = MappingSample("pure", psi=psi, phi=phi)
        io.write_json(f"{prefix}.sample.json", dict(io.sample_to_json(sample), seed=args.seed))
        io.write_json(f"{prefix}.truth.json", {"U": io.encode_complex(U), "seed": args.seed})
        written = [f"{prefix}.sample.json", f"{prefix}.truth.json"]
    elif args.kind == "mixed-unitary":
        if D != n:
            raise ValueError("mixed-unitary generation needs D == n")
        U = random_map(n, n, rng)
        rho = np.array([_random_density(n, rng) for _ in range(args.M)])
        varrho = np.einsum("ij,ljk,mk->lim", U, rho, U.conj())
        sample = MappingSample("mixed", rho=rho, varrho=varrho)
        io.write_json(f"{prefix}.sample.json", dict(io.sample_to_json(sample), seed=args.seed))
        io.write_json(f"{prefix}.truth.json", {"U": io.encode_complex(U), "seed": args.seed})
        written = [f"{prefix}.sample.json", f"{prefix}.truth.json"]
    elif args.kind == "two-hamiltonian":
        lam, nu = _random_hermitian(D, rng), _random_hermitian(n, rng)
        S = build_superop_two_hamiltonian(lam, nu)
        io.write_json(f"{prefix}.superop.json", dict(io.superop_to_json(S), seed=args.seed))
        io.write_json(f"{prefix}.truth.json", {"lambda": io.encode_complex(lam), "nu": io.encode_complex(nu),
                                               "seed": args.seed})
        written = [f"{prefix}.superop.json", f"{prefix}.truth.json"]
    elif args.kind == "kraus":
        if args.count * D < n:
            raise ValueError("need count * D >= n for a trace-preserving Kraus set")
        Z = rng.normal(size=(args.count * D, n)) + 1j * rng.normal(size=(args.count * D, n))
        Q, _ = np.linalg.qr(Z)
        B = KrausSet.from_stack(Q, D)
        psi, phi = [], []
        for _ in range(args.M):
            p = _random_state(n, rng)
            out = np.einsum("sjk,k->sj", B.operators, p)
            prob = np.linalg.norm(out, axis=1) ** 2
            s = rng.choice(len(prob), p=prob / prob.sum())
            psi.append(p)
            phi.append(out[s] / np.linalg.norm(out[s]))
        sample = MappingSample("pure", psi=np.array(psi), phi=np.array(phi))
        io.write_json(f"{prefix}.sample.json", dict(io.sample_to_json(sample), seed=args.seed))
        io.write_json(f"{prefix}.kraus.json", dict(io.kraus_to_json(B), seed=args.seed))
        written = [f"{prefix}.sample.json", f"{prefix}.kraus.json"]
    _emit(args, {"written": written, "seed": args.seed}, [f"wrote {w}" for w in written])
    return 0


def cmd_solve(args) -> int:
    S = _load(args.input, _superop_from_obj)
    sol = solve_ground(S, _options(args))
    if args.out:
        io.write_json(args.out, dict(io.solution_to_json(sol), seed=args.seed))
    _emit(args, dict(io.solution_to_json(sol), seed=args.seed), [_log_line(0, sol)])
    return 0 if sol.converged else EXIT_NOT_CONVERGED


def cmd_hierarchy(args) -> int:
    S = _load(args.input, _superop_from_obj)
    h = solve_hierarchy(S, args.count, args.orthogonality, _options(args))
    payload = dict(io.hierarchy_to_json(h), seed=args.seed)
    if args.out:
        io.write_json(args.out, payload)
    _emit(args, payload, [_log_line(s, sol) for s, sol in enumerate(h.solutions)])
    return 0 if all(h.converged) else EXIT_NOT_CONVERGED


def cmd_canonical(args) -> int:
    S = _load(args.superop, _superop_from_obj)
    sol = _load(args.input, io.solution_from_json)
    S_new, sol_new, basis = to_canonical(S, sol)
    off = sol_new.lam - np.diag(np.diag(sol_new.lam))
    stats = {
        "max_offdiag_lambda": float(np.abs(off).max()),
        "max_abs_U_minus_I": float(np.abs(sol_new.U - np.eye(S.D)).max()),
        "fidelity_before": sol.fidelity,
        "fidelity_after": sol_new.fidelity,
    }
    if args.out:
        io.write_json(args.out, dict(io.solution_to_json(sol_new), seed=args.seed,
                                     basis={"left": io.encode_complex(basis.left), "right": io.encode_complex(basis.right)}))
    if args.superop_out:
        io.write_json(args.superop_out, io.superop_to_json(S_new))
    _emit(args, stats, [f"max|offdiag lambda|={stats['max_offdiag_lambda']!r}  max|U-I|={stats['max_abs_U_minus_I']!r}",
                        _log_line(0, sol_new)])
    return 0


def _initial_map(path, S):
    U = _load(path, lambda o: io.decode_array(o["U"], 2))
    if U.shape != (S.D, S.n):
        raise InputError(f"{path}: map shape {U.shape} does not match ({S.D}, {S.n})")
    return U


def cmd_evolve(args) -> int:
    if args.gates:
        seq = _load(args.gates, io.gates_from_json)
        S = _load(args.input, _superop_from_obj) if args.input else None
        report = run_sequence_2d(_load(args.initial, lambda o: io.decode_array(o["U"], 2)), seq, S)
    else:
        S = _load(args.input, _superop_from_obj)
        U0 = _initial_map(args.initial, S)
        if args.equation == "linear":
            report = evolve_linear(S, U0, args.t, args.steps, method=args.method)
        elif args.equation == "nonlinear":
            report = evolve_nonlinear(S, U0, args.t, args.dt, sample_every=args.sample_every)
        else:
            report = evolve_gpe(S, U0, args.a, args.b, args.t, args.dt, sample_every=args.sample_every)
    traj = io.trajectory_to_json(report)
    if args.out:
        io.write_json(args.out, traj)
    last = traj[-1]
    _emit(args, {"integrator": report.integrator, "samples": len(traj), "final": last},
          [f"t={last['t']!r}  fidelity={last['fidelity']!r}  gram_dev={last['gram_dev']!r}  samples={len(traj)}"])
    return 0


def cmd_fit_kraus(args) -> int:
    sample = _load(args.input, io.sample_from_json)
    B = fit_kraus(sample, args.count, _options(args))
    if args.out:
        io.write_json(args.out, dict(io.kraus_to_json(B), seed=args.seed, fidelity=float(B.info["fidelity"]),
                                     converged=bool(B.info["converged"])))
    F = kraus_fidelity(B, sample)
    _emit(args, {"fidelity": F, "constraint_residual": kraus_constraint_residual(B), "converged": B.info["converged"]},
          [f"fidelity={F!r}  constraint_residual={kraus_constraint_residual(B)!r}  flagOK={str(B.info['converged']).lower()}"])
    return 0 if B.info["converged"] else EXIT_NOT_CONVERGED


def cmd_dos(args) -> int:
    S = _load(args.superop, _superop_from_obj)
    h = _load(args.input, lambda o: io.hierarchy_from_json(o, S))
    f = h.fidelities if args.include_unconverged else h.fidelities[h.converged]
    if args.edges:
        edges = [float(e) for e in args.edges.split(",")]
    else:
        if len(f) == 0:
            raise ValueError("no solutions to bin")
        lo, hi = float(f.min()), float(f.max())
        edges = [float(e) for e in np.linspace(lo, hi if hi > lo else lo + 1.0, args.bins + 1)]
    counts = density_of_states(h, edges, args.include_unconverged)
    _emit(args, {"edges": edges, "counts": counts.tolist()},
          [f"[{a!r}, {b!r})  {c}" for a, b, c in zip(edges[:-1], edges[1:], counts)])
    return 0


def cmd_embed(args) -> int:
    raw = _load(args.input, io.raw_sample_from_json)
    sample = embed_sample(raw, frame=args.frame)
    if args.out:
        io.write_json(args.out, io.sample_to_json(sample))
    _emit(args, {"D": sample.D, "n": sample.n, "M": sample.M}, [f"embedded M={sample.M} records: n={sample.n} D={sample.D}"])
    return 0


def cmd_pipeline(args) -> int:
    p = _load(args.input, io.pipeline_from_json)
    inputs = _load(args.inputs, lambda o: {str(k): io.decode_array(v, 2) for k, v in o.items()})
    rho = evaluate_pipeline(p, inputs)
    if args.out:
        io.write_json(args.out, {"rho": io.encode_complex(rho)})
    _emit(args, {"rho": io.encode_complex(rho)}, [f"output dim={rho.shape[0]}  trace={np.trace(rho).real!r}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance")
    common.add_argument("--max-iter", type=int, default=500)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--selection-rank", type=int, default=0)
    common.add_argument("--orthogonality", choices=["plain", "lambda", "usu", "full"], default="usu")
    common.add_argument("--restarts", type=int, default=5)
    common.add_argument("--format", choices=["text", "json"], default="text")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ssqm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a seeded synthetic instance")
    p.add_argument("--kind", choices=["pure-unitary", "mixed-unitary", "two-hamiltonian", "kraus"], required=True)
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--count", type=int, default=2, help="Kraus operator count")
    p.add_argument("--out", required=True, help="output file prefix")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", parents=[common], help="ground solution of a sample or superoperator")
    p.add_argument("input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("hierarchy", parents=[common], help="successive constrained solutions")
    p.add_argument("input")
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hierarchy)

    p = sub.add_parser("canonical", parents=[common], help="canonical form of a square solution")
    p.add_argument("input", help="solution file")
    p.add_argument("--superop", required=True, help="sample or superoperator file")
    p.add_argument("--out")
    p.add_argument("--superop-out")
    p.set_defaults(func=cmd_canonical)

    p = sub.add_parser("evolve", parents=[common], help="time evolution or 2D gate sequence")
    p.add_argument("input", nargs="?", help="sample or superoperator file")
    p.add_argument("--initial", required=True, help="file with a 'U' entry")
    p.add_argument("--equation", choices=["linear", "nonlinear", "gpe"], default="linear")
    p.add_argument("--method", choices=["spectral", "crank-nicolson"], default="spectral")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--sample-every", type=int, default=1)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--gates", help="gate-sequence file; runs the 2D sequence instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("fit-kraus", parents=[common], help="fit a Kraus channel to a pure sample")
    p.add_argument("input")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_kraus)

    p = sub.add_parser("dos", parents=[common], help="histogram of hierarchy fidelities")
    p.add_argument("input", help="hierarchy file")
    p.add_argument("--superop", required=True, help="sample or superoperator file")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--edges", help="comma-separated bin edges")
    p.add_argument("--include-unconverged", action="store_true")
    p.set_defaults(func=cmd_dos)

    p = sub.add_parser("embed", parents=[common], help="embed classical records as a pure sample")
    p.add_argument("input")
    p.add_argument("--frame", choices=["attribute", "canonical"], default="attribute")
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("pipeline", parents=[common], help="evaluate a layered channel pipeline")
    p.add_argument("input")
    p.add_argument("--inputs", required=True, help="JSON map node id -> density matrix")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _check_paths(args):
    for name in ("input", "superop", "initial", "gates", "inputs"):
        path = getattr(args, name, None)
        if path and not os.path.isfile(path):
            raise InputError(f"{path}: no such file")
    for name in ("out", "superop_out"):
        path = getattr(args, name, None)
        if path and not os.path.isdir(os.path.dirname(os.path.abspath(path))):
            raise InputError(f"{path}: output directory does not exist")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("SSQM_THREADS")
    try:
        _check_paths(args)
        with threadpool_limits(limits=int(threads) if threads else None):
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (InfeasibleConstraintsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DegenerateIterateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
