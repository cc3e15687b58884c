"""JSON formats for samples, superoperators, solutions and related records.

Complex numbers are ``[re, im]`` pairs, floats use Python's shortest
round-trip repr and files are written atomically.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .channel_model import ChannelPipeline, KrausSet, PipelineNode, RawSample
from .dynamics import EvolutionReport, GateSequence2D
from .hierarchy import Hierarchy, Orthogonality
from .tensor_core import MappingSample, SolutionPair, SuperOp


def encode_complex(a) -> list:
    """Nested lists with each complex entry as ``[re, im]``."""
    a = np.asarray(a, dtype=complex)
    if a.ndim == 0:
        return [float(a.real), float(a.imag)]
    return [encode_complex(x) for x in a]


def decode_array(obj, ndim: int) -> np.ndarray:
    """Decode nested lists into an ``ndim`` complex array.

    Entries are plain numbers or ``[re, im]`` pairs; the expected ``ndim``
    settles which.
    """
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == ndim + 1 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == ndim:
        return arr.astype(complex)
    raise ValueError(f"expected a {ndim}-dimensional array of numbers or [re, im] pairs")


def write_json(path, obj) -> None:
    """Write JSON atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    text = json.dumps(obj, indent=1) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sample_to_json(sample: MappingSample) -> dict:
    out = {"mode": sample.mode, "D": sample.D, "n": sample.n, "records": []}
    if sample.mode == "pure":
        for p, f, w in zip(sample.psi, sample.phi, sample.weights):
            out["records"].append({"psi": encode_complex(p), "phi": encode_complex(f), "weight": float(w)})
    else:
        for r, vr, w in zip(sample.rho, sample.varrho, sample.weights):
            out["records"].append({"rho": encode_complex(r), "varrho": encode_complex(vr), "weight": float(w)})
    return out


def sample_from_json(obj: dict) -> MappingSample:
    recs = obj["records"]
    weights = [float(r.get("weight", 1.0)) for r in recs]
    if obj["mode"] == "pure":
        psi = np.array([decode_array(r["psi"], 1) for r in recs])
        phi = np.array([decode_array(r["phi"], 1) for r in recs])
        sample = MappingSample("pure", psi=psi, phi=phi, weights=weights)
    elif obj["mode"] == "mixed":
        rho = np.array([decode_array(r["rho"], 2) for r in recs])
        varrho = np.array([decode_array(r["varrho"], 2) for r in recs])
        sample = MappingSample("mixed", rho=rho, varrho=varrho, weights=weights)
    else:
        raise ValueError(f"unknown sample mode {obj['mode']!r}")
    if (sample.D, sample.n) != (obj.get("D", sample.D), obj.get("n", sample.n)):
        raise ValueError("declared dimensions do not match the records")
    return sample


def superop_to_json(S: SuperOp) -> dict:
    return {"D": S.D, "n": S.n, "matrix": encode_complex(S.matrix)}


def superop_from_json(obj: dict) -> SuperOp:
    return SuperOp(decode_array(obj["matrix"], 2), int(obj["D"]), int(obj["n"]))


def solution_to_json(sol: SolutionPair) -> dict:
    D, n = sol.U.shape
    return {
        "D": D,
        "n": n,
        "lambda": encode_complex(sol.lam),
        "U": encode_complex(sol.U),
        "fidelity": float(sol.fidelity),
        "residual": float(sol.residual),
        "iterations": int(sol.iterations),
        "converged": bool(sol.converged),
    }


def solution_from_json(obj: dict) -> SolutionPair:
    return SolutionPair(
        decode_array(obj["lambda"], 2),
        decode_array(obj["U"], 2),
        float(obj["fidelity"]),
        float(obj["residual"]),
        int(obj["iterations"]),
        bool(obj["converged"]),
    )


def hierarchy_to_json(h: Hierarchy) -> dict:
    return {"orthogonality": h.orthogonality.value, "solutions": [solution_to_json(s) for s in h.solutions]}


def hierarchy_from_json(obj: dict, S: SuperOp) -> Hierarchy:
    sols = [solution_from_json(s) for s in obj["solutions"]]
    return Hierarchy(sols, Orthogonality(obj["orthogonality"]), S)


def kraus_to_json(B: KrausSet) -> dict:
    Ns, D, n = B.operators.shape
    return {"D": D, "n": n, "operators": [encode_complex(b) for b in B.operators]}


def kraus_from_json(obj: dict) -> KrausSet:
    return KrausSet(np.array([decode_array(b, 2) for b in obj["operators"]]))


def raw_sample_from_json(obj: dict) -> RawSample:
    x = decode_array(obj["x"], 2)
    f = decode_array(obj["f"], 2)
    # keep purely real data real
    x = x.real if not np.any(x.imag) else x
    f = f.real if not np.any(f.imag) else f
    return RawSample(x, f, obj.get("weights"))


def trajectory_to_json(report: EvolutionReport) -> list:
    return [
        {"t": t, "U": encode_complex(U), "fidelity": float(F), "gram_dev": float(g)}
        for t, U, F, g in zip(report.times, report.states, report.fidelities, report.gram_deviations)
    ]


def gates_from_json(obj: dict) -> GateSequence2D:
    return GateSequence2D([decode_array(m, 2) for m in obj["horizontal"]],
                          [decode_array(m, 2) for m in obj["vertical"]])


def pipeline_from_json(obj: dict) -> ChannelPipeline:
    nodes = []
    for nd in obj["nodes"]:
        kind = nd["kind"]
        payload = nd.get("payload")
        if kind == "kraus":
            payload = kraus_from_json(payload) if isinstance(payload, dict) else KrausSet(np.array([decode_array(b, 2) for b in payload]))
        elif kind == "unitary":
            payload = decode_array(payload, 2)
        nodes.append(PipelineNode(str(nd["id"]), kind, payload))
    return ChannelPipeline(nodes, [(str(a), str(b)) for a, b in obj["edges"]])
