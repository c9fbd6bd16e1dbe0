import json

import pytest

from ssc import schemas
from ssc.cli import main

BASE = {
    "problem": {"kind": "slaplace", "s": 2.0, "dim": 1, "n": 32, "f": "cosine"},
    "decomposition": {"subdomains_per_axis": 4, "overlap_layers": 2, "coarse_factor": 8},
    "solver": {"method": "psc", "max_outer_iters": 200, "outer_tol": 1e-8},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def variant(**sections):
    cfg = json.loads(json.dumps(BASE))
    for key, upd in sections.items():
        if upd is None:
            cfg[key] = None
        else:
            cfg.setdefault(key, {}).update(upd)
    return cfg


def run(tmp_path, command, cfg, *extra, out="out"):
    outdir = tmp_path / out
    code = main([command, "--config", write(tmp_path, cfg), "--out", str(outdir), *extra])
    return code, outdir


def test_solve_minimal(tmp_path):
    code, out = run(tmp_path, "solve", BASE)
    assert code == 0
    assert (out / "run.csv").read_text().splitlines()[0] == "n,F,zeta,seminorm_err,wall_ms"
    schemas.validate("run_summary", json.loads((out / "summary.json").read_text()))
    schemas.validate("mesh", json.loads((out / "mesh.json").read_text()))


def test_tau_above_bound_is_usage_error(tmp_path, capsys):
    cfg = variant(solver={"tau": 0.9})
    code, _ = run(tmp_path, "solve", cfg)
    assert code == 2
    assert "coloring bound" in capsys.readouterr().err
    code, _ = run(tmp_path, "solve", variant(solver={"tau": 0.4, "max_outer_iters": 2}), "--override-tau")
    assert code in (0, 1)


@pytest.mark.parametrize("bad", [
    {"problem": {"kind": "cubic"}},
    {"decomposition": {"subdomains_per_axis": 0}},
    {"solver": {"local_kind": "cg"}},
    {"extra": {}},
])
def test_schema_errors(tmp_path, bad):
    cfg = variant(**bad)
    assert run(tmp_path, "solve", cfg)[0] == 2


def test_unusable_inputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["frobnicate", "--config", str(bad)]) == 2
    assert main(["solve"]) == 2
    cfg = variant(decomposition={"subdomains_per_axis": 3})
    assert run(tmp_path, "solve", cfg)[0] == 2
    cfg = variant(problem={"f": "random(1)"})
    assert run(tmp_path, "solve", cfg)[0] == 2


def test_nonconvergence_is_numerical_failure(tmp_path):
    cfg = variant(solver={"max_outer_iters": 1, "outer_tol": 1e-12})
    assert run(tmp_path, "solve", cfg)[0] == 1


def test_solve_large_2d_s4(tmp_path):
    cfg = {
        "problem": {"kind": "slaplace", "s": 4.0, "dim": 2, "n": 32, "f": "cosine"},
        "decomposition": {"subdomains_per_axis": 4, "overlap_layers": 1, "coarse_factor": 4},
        "solver": {"max_outer_iters": 500, "outer_tol": 1e-6},
    }
    assert run(tmp_path, "solve", cfg)[0] == 0


@pytest.mark.parametrize("s,branch,beta", [(2.0, "linear", None), (4.0, "sublinear", 2.0), (1.5, "sublinear", 2.0)])
def test_rates(tmp_path, s, branch, beta):
    cfg = variant(problem={"s": s}, solver={"max_outer_iters": 60})
    code, out = run(tmp_path, "rates", cfg)
    doc = json.loads((out / "rates.json").read_text())
    schemas.validate("rates", doc)
    assert code == 0 and doc["passed"]
    assert doc["branch_final"] == branch
    assert doc["beta"] == (pytest.approx(beta) if beta else None)
    assert doc["constants"]["proxy"] is True
    assert (out / "rates.csv").read_text().splitlines()[0] == "n,zeta_observed,zeta_bound,branch"


def test_rates_needs_psc(tmp_path):
    assert run(tmp_path, "rates", variant(solver={"method": "ssc"}))[0] == 2


def test_constants_quadratic(tmp_path):
    cfg = variant(problem={"kind": "quadratic"})
    code, out = run(tmp_path, "constants", cfg)
    doc = json.loads((out / "constants.json").read_text())
    schemas.validate("constants", doc)
    assert code == 0
    assert doc["c_tri"] == pytest.approx(2.0, abs=1e-9)
    assert (doc["omega"], doc["theta"]) == (1.0, 1.0)
    assert doc["seeds"] and doc["sample_counts"]


def test_constants_inexact_rho(tmp_path):
    cfg = variant(problem={"s": 3.0}, solver={"local_kind": "inexact_power", "M": 8.0, "s_loc": 3.0},
                  experiment={"samples": 8})
    code, out = run(tmp_path, "constants", cfg)
    assert code == 0
    assert json.loads((out / "constants.json").read_text())["rho"] == 3.0


SWEEP = {
    "problem": {"kind": "perturbed", "s": 2.0, "dim": 1, "n": 64, "f": "random(3)"},
    "decomposition": {"subdomains_per_axis": 4, "overlap_layers": 2, "coarse_factor": 8},
    "solver": {"max_outer_iters": 200, "outer_tol": 1e-7},
    "experiment": {"eps_values": [1e-8, 1e-6, 1e-4, 1e-2], "tol": 1e-6},
}


def test_sweep_two_level(tmp_path):
    code, out = run(tmp_path, "sweep-eps", SWEEP)
    doc = json.loads((out / "sweep.json").read_text())
    schemas.validate("sweep", doc)
    assert code == 0 and doc["passed"] is True and doc["ratio"] <= 2
    assert len(list(out.glob("run_eps_*.csv"))) == 4


def test_sweep_one_level_observation(tmp_path):
    cfg = json.loads(json.dumps(SWEEP))
    cfg["decomposition"]["coarse_factor"] = None
    cfg["solver"]["max_outer_iters"] = 60
    code, out = run(tmp_path, "sweep-eps", cfg)
    doc = json.loads((out / "sweep.json").read_text())
    assert code == 0 and doc["passed"] is None
    assert not doc["kernel_decomposition"] and "kernel decomposition violated" in doc["observation"]
    assert doc["nonincreasing_in_eps"]


def test_sweep_single_eps(tmp_path):
    cfg = json.loads(json.dumps(SWEEP))
    cfg["experiment"]["eps_values"] = [1e-2]
    assert run(tmp_path, "sweep-eps", cfg)[0] == 2
    cfg["problem"]["kind"] = "slaplace"
    cfg["experiment"]["eps_values"] = [1e-2, 1e-4]
    assert run(tmp_path, "sweep-eps", cfg)[0] == 2


def test_deterministic_outputs(tmp_path):
    cfg = variant(problem={"s": 3.0, "f": "random-compatible(7)"}, experiment={"samples": 8, "seed": 3})
    _, a = run(tmp_path, "rates", cfg, out="a")
    _, b = run(tmp_path, "rates", cfg, out="b")
    for name in ("run.csv", "rates.csv", "rates.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_schema_dump(tmp_path):
    schemas.dump(tmp_path)
    for name in schemas.SCHEMAS:
        json.loads((tmp_path / f"{name}.schema.json").read_text())


def test_inexact_defaults_to_suggested_model(tmp_path):
    cfg = variant(problem={"s": 4.0, "u0": "zero"}, solver={"local_kind": "inexact_power", "max_outer_iters": 400, "outer_tol": 1e-4},
                  experiment={"samples": 8})
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    code, out = run(tmp_path, "constants", cfg, out="c")
    doc = json.loads((out / "constants.json").read_text())
    assert code == 0 and doc["rho"] == 2.0 and doc["omega_valid"]
