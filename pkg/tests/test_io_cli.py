import json
import re
import subprocess
import sys

import numpy as np
import pytest

from helpers import random_density, random_pure_sample, random_superop
from ssqm import io
from ssqm.channel_model import KrausSet, kraus_constraint_residual
from ssqm.cli import main
from ssqm.dynamics import evolve_linear
from ssqm.hierarchy import solve_hierarchy
from ssqm.solver import random_map, solve_ground
from ssqm.tensor_core import MappingSample, build_superop_two_hamiltonian

LOG_LINE = re.compile(r"^solution#=(\d+)  fdiffSK=(\S+)  Tr lambda(\d+)=(\S+)  flagOK=(true|false)$")


def test_complex_encoding_round_trip(rng):
    A = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    text = json.dumps(io.encode_complex(A))
    assert np.array_equal(io.decode_array(json.loads(text), 2), A)
    assert np.array_equal(io.decode_array([[1, 2], [3, 4]], 2), np.array([[1, 2], [3, 4]], complex))
    with pytest.raises(ValueError):
        io.decode_array([1, 2, 3], 2)


def test_record_round_trips(rng, tmp_path):
    sample = random_pure_sample(2, 3, 4, rng)
    back = io.sample_from_json(json.loads(json.dumps(io.sample_to_json(sample))))
    assert np.array_equal(back.psi, sample.psi) and np.array_equal(back.weights, sample.weights)
    mixed = MappingSample("mixed", rho=np.array([random_density(2, rng)]), varrho=np.array([random_density(2, rng)]))
    back = io.sample_from_json(json.loads(json.dumps(io.sample_to_json(mixed))))
    assert np.array_equal(back.varrho, mixed.varrho)
    S = random_superop(2, 2, rng)
    assert np.array_equal(io.superop_from_json(json.loads(json.dumps(io.superop_to_json(S)))).matrix, S.matrix)
    sol = solve_ground(S)
    path = tmp_path / "sol.json"
    io.write_json(path, io.solution_to_json(sol))
    back = io.solution_from_json(io.read_json(path))
    assert np.array_equal(back.U, sol.U) and back.fidelity == sol.fidelity and back.converged == sol.converged
    h = solve_hierarchy(S, 2)
    hb = io.hierarchy_from_json(json.loads(json.dumps(io.hierarchy_to_json(h))), S)
    assert hb.orthogonality == h.orthogonality and np.array_equal(hb.fidelities, h.fidelities)
    B = KrausSet(rng.normal(size=(2, 2, 3)) + 0j)
    assert np.array_equal(io.kraus_from_json(json.loads(json.dumps(io.kraus_to_json(B)))).operators, B.operators)
    traj = io.trajectory_to_json(evolve_linear(S, sol.U, 1.0, steps=2))
    assert [r["t"] for r in traj] == [0.0, 0.5, 1.0]


def test_sample_dimension_mismatch(rng):
    obj = io.sample_to_json(random_pure_sample(2, 3, 2, rng))
    obj["n"] = 5
    with pytest.raises(ValueError):
        io.sample_from_json(obj)


def test_write_json_is_atomic(tmp_path):
    path = tmp_path / "x.json"
    io.write_json(path, {"a": 1})
    with pytest.raises(TypeError):
        io.write_json(path, {"a": object()})
    assert io.read_json(path) == {"a": 1}
    assert [p.name for p in tmp_path.iterdir()] == ["x.json"]


def _run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_is_deterministic(tmp_path, capsys):
    for tag in ("a", "b"):
        code, _, _ = _run(["gen", "--kind", "pure-unitary", "--D", 4, "--n", 4, "--M", 48, "--seed", 7,
                           "--out", tmp_path / tag], capsys)
        assert code == 0
    for suffix in ("sample.json", "truth.json"):
        assert (tmp_path / f"a.{suffix}").read_bytes() == (tmp_path / f"b.{suffix}").read_bytes()
    assert io.read_json(tmp_path / "a.sample.json")["seed"] == 7


def test_gen_two_hamiltonian_structure(tmp_path, capsys):
    assert _run(["gen", "--kind", "two-hamiltonian", "--D", 2, "--n", 3, "--out", tmp_path / "t"], capsys)[0] == 0
    S = io.superop_from_json(io.read_json(tmp_path / "t.superop.json"))
    truth = io.read_json(tmp_path / "t.truth.json")
    lam, nu = io.decode_array(truth["lambda"], 2), io.decode_array(truth["nu"], 2)
    assert np.abs(S.matrix - build_superop_two_hamiltonian(lam, nu).matrix).max() == 0


def test_gen_kraus_feasible(tmp_path, capsys):
    assert _run(["gen", "--kind", "kraus", "--D", 2, "--n", 3, "--M", 5, "--count", 2, "--out", tmp_path / "k"], capsys)[0] == 0
    B = io.kraus_from_json(io.read_json(tmp_path / "k.kraus.json"))
    assert kraus_constraint_residual(B) < 1e-12


def test_solve_hierarchy_canonical_flow(tmp_path, capsys):
    _run(["gen", "--kind", "pure-unitary", "--D", 3, "--n", 3, "--M", 27, "--seed", 1, "--out", tmp_path / "p"], capsys)
    sample = tmp_path / "p.sample.json"
    code, out, _ = _run(["solve", sample, "--out", tmp_path / "sol.json"], capsys)
    assert code == 0
    m = LOG_LINE.match(out.strip())
    assert m and m.group(5) == "true"
    assert float(m.group(4)) == pytest.approx(27, abs=1e-6 * 27)

    code, out, _ = _run(["hierarchy", sample, "--orthogonality", "usu", "--count", 3, "--out", tmp_path / "h.json"], capsys)
    lines = out.strip().splitlines()
    assert len(lines) == 3 and all(LOG_LINE.match(x) for x in lines)
    F = [float(LOG_LINE.match(x).group(4)) for x in lines]
    assert F[0] >= F[1] - 1e-9 >= F[2] - 2e-9
    assert code in (0, 3)

    code, out, _ = _run(["canonical", tmp_path / "sol.json", "--superop", sample, "--format", "json"], capsys)
    stats = json.loads(out)
    assert code == 0
    assert stats["max_offdiag_lambda"] < 1e-10 and stats["max_abs_U_minus_I"] < 1e-10

    code, out, _ = _run(["dos", tmp_path / "h.json", "--superop", sample, "--bins", 2, "--format", "json"], capsys)
    assert code == 0 and sum(json.loads(out)["counts"]) >= 1


def test_outputs_are_byte_identical(tmp_path, capsys):
    _run(["gen", "--kind", "pure-unitary", "--D", 2, "--n", 3, "--M", 10, "--seed", 3, "--out", tmp_path / "p"], capsys)
    for tag in ("a", "b"):
        _run(["hierarchy", tmp_path / "p.sample.json", "--count", 2, "--seed", 5, "--out", tmp_path / f"{tag}.json"], capsys)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_evolve_fit_embed_pipeline(tmp_path, capsys, rng):
    _run(["gen", "--kind", "pure-unitary", "--D", 2, "--n", 2, "--M", 12, "--out", tmp_path / "p"], capsys)
    sample = tmp_path / "p.sample.json"
    code, out, _ = _run(["evolve", sample, "--initial", tmp_path / "p.truth.json", "--equation", "nonlinear",
                         "--t", 0.1, "--dt", 0.01, "--out", tmp_path / "traj.json"], capsys)
    assert code == 0 and len(io.read_json(tmp_path / "traj.json")) == 11

    io.write_json(tmp_path / "gates.json", {"horizontal": [io.encode_complex(random_map(2, 2, rng))],
                                           "vertical": [io.encode_complex(random_map(2, 2, rng))]})
    code, out, _ = _run(["evolve", "--initial", tmp_path / "p.truth.json", "--gates", tmp_path / "gates.json"], capsys)
    assert code == 0 and "samples=2" in out

    code, out, _ = _run(["fit-kraus", sample, "--count", 1, "--format", "json"], capsys)
    assert code == 0 and json.loads(out)["fidelity"] == pytest.approx(12, abs=1e-5)

    io.write_json(tmp_path / "raw.json", {"x": rng.normal(size=(6, 3)).tolist(), "f": rng.normal(size=(6, 2)).tolist()})
    code, out, _ = _run(["embed", tmp_path / "raw.json", "--out", tmp_path / "emb.json"], capsys)
    assert code == 0 and io.sample_from_json(io.read_json(tmp_path / "emb.json")).M == 6

    pipe = {"nodes": [{"id": "a", "kind": "unitary", "payload": io.encode_complex(np.eye(2))},
                      {"id": "b", "kind": "kraus", "payload": [io.encode_complex(np.eye(2))]}],
            "edges": [["a", "b"]]}
    io.write_json(tmp_path / "pipe.json", pipe)
    rho = random_density(2, rng)
    io.write_json(tmp_path / "in.json", {"a": io.encode_complex(rho)})
    code, out, _ = _run(["pipeline", tmp_path / "pipe.json", "--inputs", tmp_path / "in.json", "--out", tmp_path / "o.json"], capsys)
    assert code == 0
    assert np.allclose(io.decode_array(io.read_json(tmp_path / "o.json")["rho"], 2), rho)


def test_exit_codes(tmp_path, capsys):
    assert _run(["solve", tmp_path / "missing.json"], capsys)[0] == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert _run(["solve", tmp_path / "bad.json"], capsys)[0] == 1
    assert _run(["gen", "--kind", "pure-unitary", "--D", 3, "--n", 2, "--out", tmp_path / "x"], capsys)[0] == 2
    _run(["gen", "--kind", "pure-unitary", "--D", 2, "--n", 2, "--M", 8, "--out", tmp_path / "p"], capsys)
    assert _run(["solve", tmp_path / "p.sample.json", "--out", tmp_path / "nodir" / "s.json"], capsys)[0] == 1
    code, _, err = _run(["hierarchy", tmp_path / "p.sample.json", "--count", 3], capsys)
    assert code == 2 and "over-constrain" in err
    S = random_superop(3, 3, np.random.default_rng(0))
    io.write_json(tmp_path / "s.json", io.superop_to_json(S))
    code, out, _ = _run(["solve", tmp_path / "s.json", "--max-iter", 1, "--restarts", 0, "--tol", 1e-15,
                         "--out", tmp_path / "best.json"], capsys)
    assert code == 3 and "flagOK=false" in out
    assert io.read_json(tmp_path / "best.json")["converged"] is False


def test_threads_env_and_module_entry(tmp_path, monkeypatch):
    monkeypatch.setenv("SSQM_THREADS", "1")
    proc = subprocess.run([sys.executable, "-m", "ssqm", "gen", "--kind", "two-hamiltonian", "--D", "2", "--n", "2",
                           "--out", str(tmp_path / "t")], capture_output=True, text=True)
    assert proc.returncode == 0 and "wrote" in proc.stdout
