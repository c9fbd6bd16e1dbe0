import numpy as np
import pytest

from ssc import decomposition as dd
from ssc import fem_core as fc
from ssc import problems as pb
from ssc import solver as sv
from ssc.errors import FailedPreconditionError, InvalidArgumentError

from conftest import sine_start, smooth_load


def two_level(mesh, N=2, L=1, factor=None):
    fam = dd.build_overlapping_dd(mesh, N, L)
    return dd.add_coarse_space(fam, fc.coarsen(mesh, factor or mesh.n // N))


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        sv.SolverConfig(tau=1.5)
    with pytest.raises(InvalidArgumentError):
        sv.SolverConfig(local_kind="cg")
    with pytest.raises(InvalidArgumentError):
        sv.SolverConfig(local_kind="inexact_power", M=0.0)
    with pytest.raises(InvalidArgumentError):
        sv.SolverConfig(outer_tol=0.0)


def test_local_solve_at_local_optimum_is_zero():
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 3.0, smooth_load(m))
    fam = two_level(m)
    u = sv.global_newton_oracle(prob)
    for j in range(3):
        w = sv.local_solve_exact(prob, fam, j, u, sv.SolverConfig())
        assert np.max(np.abs(w.coeffs)) <= 1e-8
        w = sv.local_solve_inexact_power(prob, fam, j, u, 4.0, 2.0, sv.SolverConfig())
        assert np.max(np.abs(w.coeffs)) <= 1e-8


def test_local_solve_quadratic_matches_dense(rng):
    m = fc.build_square_mesh(6)
    A = (m.stiffness_matrix + m.mass_matrix).toarray()
    prob = pb.quadratic_problem(m, A, fc.DualVector(m, rng.standard_normal(m.n_vertices)))
    fam = two_level(m, N=2, L=1, factor=3)
    v = fc.FeFunction(m, rng.standard_normal(m.n_vertices))
    for sub in fam.all_subspaces:
        B = sub.basis.toarray()
        g = B.T @ prob.gradient_x(v.coeffs)
        expect = B @ np.linalg.solve(B.T @ A @ B, -g)
        w = sv.local_solve_exact(prob, fam, sub.index, v, sv.SolverConfig())
        assert np.max(np.abs(w.coeffs - expect)) <= 1e-10


def test_local_solve_singular_quadratic(rng):
    m = fc.build_interval_mesh(8)
    K = m.stiffness_matrix.toarray()
    prob = pb.quadratic_problem(m, K, smooth_load(m), kernel_basis=[fc.constant(m)])
    fam = two_level(m)
    v = fc.FeFunction(m, rng.standard_normal(9))
    w = sv.local_solve_exact(prob, fam, 0, v, sv.SolverConfig())
    B = fam.subspace(0).basis.toarray()
    g = B.T @ prob.gradient_x(v.coeffs + w.coeffs)
    assert np.linalg.norm(g) <= 1e-10


def test_exact_local_solve_decreases_energy(rng):
    m = fc.build_interval_mesh(8)
    prob = pb.slaplace_problem(m, 4.0, smooth_load(m))
    fam = dd.build_overlapping_dd(m, 2, 1)
    v = fc.FeFunction(m, rng.standard_normal(9))
    w = sv.local_solve_exact(prob, fam, 1, v, sv.SolverConfig())
    assert prob.energy_x(v.coeffs + w.coeffs) < prob.energy_x(v.coeffs)


def test_inexact_power_quadratic_closed_form(rng):
    m = fc.build_interval_mesh(16)
    A = m.stiffness_matrix + m.mass_matrix
    prob = pb.quadratic_problem(m, A, fc.DualVector(m, rng.standard_normal(17)))
    fam = two_level(m, N=4, factor=4)
    v = fc.FeFunction(m, rng.standard_normal(17))
    M = 3.0
    for sub in fam.all_subspaces:
        B = sub.basis.toarray()
        G = B.T @ (A.toarray() + m.mass_matrix.toarray()) @ B
        g = B.T @ prob.gradient_x(v.coeffs)
        expect = B @ np.linalg.solve(M * G, -g)
        w = sv.local_solve_inexact_power(prob, fam, sub.index, v, M, 2.0, sv.SolverConfig())
        assert np.max(np.abs(w.coeffs - expect)) <= 1e-10


def test_inexact_power_damping_is_monotone(rng):
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 3.0, smooth_load(m))
    fam = two_level(m, N=4, factor=4)
    v = fc.FeFunction(m, rng.standard_normal(17))
    for j in range(5):
        a = sv.local_solve_inexact_power(prob, fam, j, v, 2.0, 3.0, sv.SolverConfig())
        b = sv.local_solve_inexact_power(prob, fam, j, v, 20.0, 3.0, sv.SolverConfig())
        assert pb.model_norm(prob, b.coeffs, 3.0) < pb.model_norm(prob, a.coeffs, 3.0)


def test_run_from_minimizer_stops_immediately():
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 3.0, smooth_load(m))
    fam = two_level(m)
    u = sv.global_newton_oracle(prob)
    for run in (sv.run_psc, sv.run_ssc):
        rec = run(prob, fam, sv.SolverConfig(), u, reference=u)
        assert rec.n_iters == 0 and rec.iters_to_tol == 0 and rec.zetas[0] <= 1e-14


def test_psc_spd_quadratic_strict_descent():
    m = fc.build_interval_mesh(32)
    A = m.stiffness_matrix + m.mass_matrix
    f = fc.load_of(sine_start(m))
    prob = pb.quadratic_problem(m, A, f)
    fam = two_level(m, N=2)
    rec = sv.run_psc(prob, fam, sv.SolverConfig(tau=1 / 3, outer_tol=1e-10), sine_start(m) * 0.0)
    u = np.linalg.solve(A.toarray(), f.values)
    assert rec.converged
    E = rec.energies
    assert all(b < a for a, b in zip(E[:-1], E[1:]))
    assert abs(E[-1] - prob.energy_x(u)) <= 1e-9 * (1 + abs(prob.energy_x(u)))
    ssc = sv.run_ssc(prob, fam, sv.SolverConfig(outer_tol=1e-10), sine_start(m) * 0.0)
    assert ssc.iters_to_tol <= rec.iters_to_tol


def test_singular_psc_seminorm_error():
    m = fc.build_interval_mesh(32)
    prob = pb.slaplace_problem(m, 2.0, smooth_load(m))
    fam = two_level(m, N=4, factor=4)
    rec = sv.run_psc(prob, fam, sv.SolverConfig(outer_tol=1e-15), sine_start(m) + 3.0)
    assert rec.converged
    assert rec.seminorm_errors[-1] <= 1e-6
    assert "kernel_normalized_reference" in rec.flags


def test_single_subspace_one_sweep():
    m = fc.build_interval_mesh(8)
    prob = pb.slaplace_problem(m, 3.0, smooth_load(m))
    fam = dd.build_overlapping_dd(m, 1, 1)
    rec = sv.run_ssc(prob, fam, sv.SolverConfig(outer_tol=1e-10), sine_start(m))
    assert rec.iters_to_tol <= 1 or rec.zetas[1] <= 1e-12


def test_tau_above_coloring_bound_rejected():
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 2.0, smooth_load(m))
    fam = two_level(m, N=4, factor=4)
    with pytest.raises(InvalidArgumentError):
        sv.run_psc(prob, fam, sv.SolverConfig(tau=0.9), sine_start(m))
    rec = sv.run_psc(prob, fam, sv.SolverConfig(tau=0.9, override_tau=True, max_outer_iters=1), sine_start(m))
    assert rec.tau == 0.9


def test_incompatible_load_rejected():
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 2.0, fc.load_of(fc.constant(m)))
    with pytest.raises(FailedPreconditionError):
        sv.run_psc(prob, two_level(m), sv.SolverConfig(), sine_start(m))


def test_oracles(rng):
    m = fc.build_interval_mesh(16)
    A = m.stiffness_matrix + 2 * m.mass_matrix
    f = fc.DualVector(m, rng.standard_normal(17))
    u = sv.global_newton_oracle(pb.quadratic_problem(m, A, f))
    assert np.max(np.abs(u.coeffs - np.linalg.solve(A.toarray(), f.values))) <= 1e-10
    # the s = 3 minimum is degenerate, so Newton only halves the error per step
    zero = sv.global_newton_oracle(pb.slaplace_problem(m, 3.0), fc.FeFunction(m, rng.standard_normal(17)), tol=1e-24)
    assert np.max(np.abs(zero.coeffs)) <= 1e-10
    pert = sv.global_newton_oracle(pb.perturbed_problem(m, 2.0, 1.0, f))
    B = (m.stiffness_matrix + m.mass_matrix).toarray()
    assert np.max(np.abs(pert.coeffs - np.linalg.solve(B, f.values))) <= 1e-9


def test_descent_check_records():
    empty = sv.RunRecord(method="psc", tau=0.5)
    assert sv.descent_check(empty)
    bump = sv.RunRecord(method="psc", tau=0.5, energies=[1.0, 0.5, 0.7])
    assert not sv.descent_check(bump)


def test_threaded_psc_matches_serial():
    m = fc.build_square_mesh(8)
    prob = pb.slaplace_problem(m, 3.0, smooth_load(m))
    fam = two_level(m, N=2, factor=4)
    cfg = dict(max_outer_iters=5, record_timing=False)
    a = sv.run_psc(prob, fam, sv.SolverConfig(**cfg), sine_start(m))
    b = sv.run_psc(prob, fam, sv.SolverConfig(workers=4, **cfg), sine_start(m))
    assert a.energies == b.energies


def test_csv_output(tmp_path):
    m = fc.build_interval_mesh(16)
    prob = pb.slaplace_problem(m, 2.0, smooth_load(m))
    rec = sv.run_psc(prob, two_level(m), sv.SolverConfig(max_outer_iters=4, record_timing=False), sine_start(m))
    path = tmp_path / "run.csv"
    rec.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,F,zeta,seminorm_err,wall_ms"
    assert len(lines) == rec.n_iters + 2


def test_newton_handles_flat_elements():
    m = fc.build_interval_mesh(64)
    prob = pb.slaplace_problem(m, 1.5, smooth_load(m))
    u = sv.global_newton_oracle(prob, sine_start(m))
    g = prob.gradient_x(u.coeffs)
    assert np.linalg.norm(g - g.mean()) <= 1e-8


@pytest.mark.parametrize("s", [1.5, 2.0, 4.0])
def test_suggest_power_model(s):
    mesh = fc.build_interval_mesh(32)
    prob = pb.slaplace_problem(mesh, s, smooth_load(mesh))
    u0 = sine_start(mesh)
    M, s_loc = sv.suggest_power_model(prob, u0)
    assert s_loc == min(s, 2.0) and M > 0
    fam = dd.add_coarse_space(dd.build_overlapping_dd(mesh, 4, 2), fc.coarsen(mesh, 8))
    cfg = sv.SolverConfig(local_kind="inexact_power", M=M, s_loc=s_loc, max_outer_iters=20, record_timing=False)
    assert sv.descent_check(sv.run_ssc(prob, fam, cfg, u0))
