"""
Acceptance checks C1-C10. Each test records one PASS/FAIL line that is
printed in the terminal summary, then asserts.
"""

import io
import itertools
import math
import time

import numpy as np
import pytest

from ssc import decomposition as dd
from ssc import fem_core as fc
from ssc import problems as pb
from ssc import solver as sv
from ssc import theory as th

from conftest import ACCEPTANCE_LINES, sine_start, smooth_load

# tolerances of the acceptance criteria
DESCENT_REL = 1e-12
ORACLE_REL = 1e-8
SEMINORM_ERR = 1e-6
SHIFT_INVARIANCE = 1e-12
BOUND_REL = 1e-9
EPS_RATIO = 2.0
EPS_REDUCTION = 1e-6
RECON = 1e-12
ORTH = 1e-7
MINIMALITY = 1e-10
CQ_SLACK = 1e-10
TRIANGLE = 1e-9
FD_REL = 1e-6


def report(tag, ok, detail, t0):
    ACCEPTANCE_LINES.append(f"[{tag}] {'PASS' if ok else 'FAIL'} {detail} ({time.perf_counter() - t0:.1f}s)")
    assert ok, detail


def mesh_for(dim):
    return fc.build_interval_mesh(64) if dim == 1 else fc.build_square_mesh(16)


def family_for(mesh, coarse):
    fam = dd.build_overlapping_dd(mesh, 4, 2 if mesh.dim == 1 else 1)
    if coarse:
        fam = dd.add_coarse_space(fam, fc.coarsen(mesh, 8 if mesh.dim == 1 else 4))
    return fam


def inexact_cfg(prob, u0, **kw):
    M, s_loc = sv.suggest_power_model(prob, u0)
    return sv.SolverConfig(local_kind="inexact_power", M=M, s_loc=s_loc, **kw)


def test_c1_energy_descent():
    t0 = time.perf_counter()
    bad = []
    count = 0
    for s, dim, coarse, local, method in itertools.product(
            (1.5, 2.0, 3.0, 4.0), (1, 2), (False, True), ("exact", "inexact_power"), ("psc", "ssc")):
        mesh = mesh_for(dim)
        prob = pb.slaplace_problem(mesh, s, smooth_load(mesh))
        fam = family_for(mesh, coarse)
        kw = dict(max_outer_iters=12, record_timing=False)
        cfg = sv.SolverConfig(**kw) if local == "exact" else inexact_cfg(prob, sine_start(mesh), **kw)
        run = sv.run_psc if method == "psc" else sv.run_ssc
        rec = run(prob, fam, cfg, sine_start(mesh))
        count += 1
        slack = DESCENT_REL * (1 + abs(rec.energies[0]))
        seqs = [rec.energies] + list(rec.substep_energies)
        if any(b > a + slack for seq in seqs for a, b in zip(seq, seq[1:])) or not sv.descent_check(rec):
            bad.append((s, dim, coarse, local, method))
    report("C1", not bad, f"energy descent on {count} configurations, violations: {bad}", t0)


def test_c2_oracle_equivalence():
    t0 = time.perf_counter()
    worst_rel, worst_semi, worst_shift = 0.0, 0.0, 0.0
    for s, dim in itertools.product((1.5, 2.0, 3.0, 4.0), (1, 2)):
        mesh = mesh_for(dim)
        fam = family_for(mesh, True)
        cfg = sv.SolverConfig(outer_tol=1e-14, max_outer_iters=300, record_timing=False)
        f = fc.load_of(sine_start(mesh))
        coercive = [pb.perturbed_problem(mesh, s, 1e-2, f)]
        if s == 2.0:
            coercive.append(pb.quadratic_problem(mesh, mesh.stiffness_matrix + mesh.mass_matrix, f))
        for prob in coercive:
            u = sv.global_newton_oracle(prob)
            Fu = prob.energy_x(u.coeffs)
            rec = sv.run_psc(prob, fam, cfg, sine_start(mesh) * 0.0)
            worst_rel = max(worst_rel, abs(rec.energies[-1] - Fu) / abs(Fu))
        sing = pb.slaplace_problem(mesh, s, smooth_load(mesh))
        # the seminorm error is about sqrt(zeta), so drive zeta to roundoff
        tight = sv.SolverConfig(outer_tol=1e-18, max_outer_iters=400, record_timing=False)
        rec = sv.run_psc(sing, fam, tight, sine_start(mesh) + 2.0)
        worst_semi = max(worst_semi, rec.seminorm_errors[-1])
        x = rec.final_iterate.coeffs
        F = sing.energy_x(x)
        for c in (-3.0, 0.5, 10.0):
            worst_shift = max(worst_shift, abs(sing.energy_x(x + c) - F) / (1 + abs(F)))
    ok = worst_rel <= ORACLE_REL and worst_semi <= SEMINORM_ERR and worst_shift <= SHIFT_INVARIANCE
    report("C2", ok, f"max rel energy gap {worst_rel:.2e}, max seminorm error {worst_semi:.2e}, "
                     f"kernel shift {worst_shift:.2e}", t0)


def _rate_case(s, dim):
    mesh = fc.build_interval_mesh(32) if dim == 1 else fc.build_square_mesh(8)
    prob = pb.slaplace_problem(mesh, s, smooth_load(mesh))
    fam = dd.build_overlapping_dd(mesh, 4, 2 if dim == 1 else 1)
    fam = dd.add_coarse_space(fam, fc.coarsen(mesh, 8 if dim == 1 else 2))
    u0 = sine_start(mesh)
    rec = sv.run_psc(prob, fam, sv.SolverConfig(max_outer_iters=60, record_timing=False), u0)
    u = sv.global_newton_oracle(prob, u0)
    for factor in (1, 10):
        spec = th.SampleSpec(count=32 * factor, u0=u0, u_ref=u)
        params = th.RateParams(prob.p, prob.q, rec.tau, th.estimate_ck0(prob, fam, spec),
                               th.estimate_muk0(prob, u, spec), rec.r0_empirical, rec.zetas[0])
        bounds, branches = th.bound_curve(params, rec.n_iters)
        viol = [n for n, z in enumerate(rec.zetas) if z > bounds[n] * (1 + BOUND_REL)]
        if not viol:
            break
    beta = None if params.p == params.q else params.sharp_constants()[0]
    return viol, branches[-1], beta, factor


@pytest.mark.parametrize("case,s,branch,beta", [("a", 2.0, "linear", None), ("b", 4.0, "sublinear", 2.0),
                                                ("c", 1.5, "sublinear", 2.0)])
def test_c3_rate_envelope(case, s, branch, beta):
    t0 = time.perf_counter()
    details, ok = [], True
    for dim in (1, 2):
        viol, br, b, factor = _rate_case(s, dim)
        good = not viol and br == branch and (b == beta if beta is None else math.isclose(b, beta))
        ok &= good
        details.append(f"{dim}D branch={br} beta={b} samples x{factor} violations={viol[:3]}")
    report(f"C3{case}", ok, f"s={s}: " + "; ".join(details), t0)


def _sweep(coarse, cap):
    mesh = fc.build_interval_mesh(64)
    rng = np.random.default_rng(3)
    f = fc.DualVector(mesh, mesh.mass_lumped * rng.standard_normal(mesh.n_vertices))
    fam = dd.build_overlapping_dd(mesh, 4, 2)
    if coarse:
        fam = dd.add_coarse_space(fam, fc.coarsen(mesh, 8))
    cfg = sv.SolverConfig(max_outer_iters=cap, outer_tol=1e-7, record_timing=False)
    recs = {e: sv.run_psc(pb.perturbed_problem(mesh, 2.0, e, f), fam, cfg, sine_start(mesh))
            for e in (1e-8, 1e-6, 1e-4, 1e-2)}
    kernel_ok = dd.kernel_decomposition_check(fam, pb.perturbed_problem(mesh, 2.0, 1e-2, f))
    return th.eps_independence_report(recs, EPS_REDUCTION, kernel_ok, threshold=EPS_RATIO)


def test_c4_eps_independence():
    t0 = time.perf_counter()
    two = _sweep(True, 400)
    one = _sweep(False, 400)
    counts2 = [r["iters"] for r in two["rows"]]
    counts1 = [r["iters"] for r in one["rows"]]
    red1 = [f"{r['final_reduction']:.1e}" for r in one["rows"]]
    # one-level runs all hit the cap, so the achieved reduction backs up the tie
    ok = (two["passed"] is True and one["passed"] is None and one["nonincreasing_in_eps"]
          and one["reduction_monotone"])
    report("C4", ok, f"two-level iters {counts2} ratio {two['ratio']:.2f}; one-level iters {counts1} "
                     f"(reduction reached {red1})", t0)


def test_c5_duality_decomposition():
    t0 = time.perf_counter()
    mesh = fc.build_interval_mesh(32)
    rng = np.random.default_rng(5)
    worst = dict(recon=0.0, orth=0.0, minimal=-np.inf, cq=-np.inf)
    cases = [(pb.slaplace_problem(mesh, 3.0), "l2"), (pb.slaplace_problem(mesh, 3.0), "eps_q"),
             (pb.slaplace_problem(mesh, 1.5), "eps_q")]
    for prob, kind in cases:
        for _ in range(100):
            v = fc.FeFunction(mesh, rng.standard_normal(33) + rng.normal(0, 3))
            d = th.duality_decompose(v, prob, kind, eps=0.1)
            norm = d.norm
            worst["recon"] = max(worst["recon"], np.max(np.abs(d.phi.coeffs + d.xi.coeffs - v.coeffs)))
            worst["orth"] = max(worst["orth"], d.orth_residual)
            nxi = norm(d.xi.coeffs)
            shifts = rng.standard_normal(100) * 2.0
            worst["minimal"] = max(worst["minimal"], max(nxi - norm(d.xi.coeffs + c) for c in shifts))
            q = prob.q if kind == "eps_q" else 2.0
            lhs = norm(d.phi.coeffs) ** q + nxi**q
            worst["cq"] = max(worst["cq"], lhs - th.cq_constant(q) * norm(v.coeffs) ** q)
    ok = (worst["recon"] <= RECON and worst["orth"] <= ORTH and worst["minimal"] <= MINIMALITY
          and worst["cq"] <= CQ_SLACK)
    report("C5", ok, "reconstruction {recon:.1e}, orthogonality {orth:.1e}, minimality excess {minimal:.1e}, "
                     "C_q excess {cq:.1e}".format(**worst), t0)


def test_c6_triangle_constant():
    t0 = time.perf_counter()
    mesh = fc.build_square_mesh(8)
    prob = pb.quadratic_problem(mesh, mesh.stiffness_matrix, kernel_basis=[fc.constant(mesh)])
    est, ratios = th.estimate_triangle_constant(prob, th.SampleSpec(count=200, seed=11), return_samples=True)
    diag = ratios[::4]
    ok = abs(est - 2.0) <= TRIANGLE and all(abs(r - 2.0) <= TRIANGLE for r in diag)
    report("C6", ok, f"sup ratio {est:.12f}, w1 = w2 samples within {max(abs(r - 2) for r in diag):.1e} of 2", t0)


def test_c7_inexact_local_theory():
    t0 = time.perf_counter()
    mesh = fc.build_interval_mesh(32)
    fam = family_for(mesh, True)
    spec = th.SampleSpec(count=6, u0=sine_start(mesh))
    rho_ok = all(th.estimate_omega_theta(pb.slaplace_problem(mesh, 3.0, smooth_load(mesh)), fam, 4.0, r, spec)[1] == r
                 for r in (1.5, 2.0, 3.0))
    exact = th.estimate_omega_theta(pb.slaplace_problem(mesh, 3.0), fam, 4.0, 2.0, spec, local_kind="exact")
    A = mesh.stiffness_matrix
    prob = pb.quadratic_problem(mesh, A, smooth_load(mesh), kernel_basis=[fc.constant(mesh)])
    lam = 0.0
    for sub in fam.all_subspaces:
        B = sub.basis.toarray()
        G = B.T @ (A + mesh.mass_matrix).toarray() @ B
        lam = max(lam, np.max(np.linalg.eigvals(np.linalg.solve(G, B.T @ A.toarray() @ B)).real))
    M = lam
    cfg = sv.SolverConfig(local_kind="inexact_power", M=M, s_loc=2.0, max_outer_iters=40, record_timing=False)
    rec = sv.run_psc(prob, fam, cfg, sine_start(mesh))
    omega, rho, theta, valid = th.estimate_omega_theta(prob, fam, M, 2.0, spec, logged=rec.inexact_log)
    slack = 1e-12 * (1 + abs(rec.energies[0]))
    lemma = all(e["decrease"] >= (1 - omega / rho) * e["dj_prime_dot"] - slack for e in rec.inexact_log)
    ok = rho_ok and exact[0] == 1.0 and exact[2] == 1.0 and omega <= 1.0 + 1e-12 and theta == 1.0 and lemma
    report("C7", ok, f"rho = s_loc: {rho_ok}; exact omega/theta {exact[0]}/{exact[2]}; quadratic M={M:.3f}: "
                     f"omega {omega:.4f}, theta {theta}, local descent on {len(rec.inexact_log)} logged steps: {lemma}",
           t0)


def test_c8_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst, checks = 0.0, 0
    for mesh in (fc.build_interval_mesh(16), fc.build_square_mesh(4)):
        f = smooth_load(mesh)
        probs = [pb.quadratic_problem(mesh, mesh.stiffness_matrix, f, kernel_basis=[fc.constant(mesh)])]
        for s in (1.5, 2.0, 3.0, 4.0):
            probs += [pb.slaplace_problem(mesh, s, f), pb.perturbed_problem(mesh, s, 0.05, f)]
        for prob in probs:
            for _ in range(5):
                x, d = rng.standard_normal((2, mesh.n_vertices))
                h = 1e-5
                fd = (prob.energy_x(x + h * d) - prob.energy_x(x - h * d)) / (2 * h)
                an = float(prob.gradient_x(x) @ d)
                worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
                checks += 1
    report("C8", worst <= FD_REL, f"{checks} directional FD checks, worst relative error {worst:.2e}", t0)


def test_c9_stable_decomposition_trend():
    t0 = time.perf_counter()
    mesh = fc.build_interval_mesh(64)
    ok, parts = True, []
    for s in (2.0, 3.0):
        prob = pb.slaplace_problem(mesh, s, smooth_load(mesh))
        spec = th.SampleSpec(count=32, u0=sine_start(mesh))
        ratio, est = [], []
        for L in (8, 4, 2):
            fam = dd.add_coarse_space(dd.build_overlapping_dd(mesh, 4, L), fc.coarsen(mesh, 16))
            ratio.append(fam.H_layers / fam.delta_layers)
            est.append(th.estimate_ck0(prob, fam, spec))
        ok &= all(b >= a for a, b in zip(est, est[1:]))
        slope = np.polyfit(np.log(ratio), np.log(est), 1)[0]
        q = min(s, 2.0)
        parts.append(f"s={s}: H/delta {ratio} -> C {[round(e, 3) for e in est]}, fitted exponent {slope:.2f} "
                     f"(reference {q * (s - 1) / s:.2f})")
    report("C9", ok, "; ".join(parts), t0)


def _csv_bytes(seed):
    mesh = fc.build_square_mesh(8)
    rng = np.random.default_rng(seed)
    f = fc.make_compatible(fc.DualVector(mesh, mesh.mass_lumped * rng.standard_normal(mesh.n_vertices)))
    prob = pb.slaplace_problem(mesh, 3.0, f)
    fam = dd.add_coarse_space(dd.build_overlapping_dd(mesh, 2, 1), fc.coarsen(mesh, 4))
    out = []
    for run, workers in ((sv.run_psc, 1), (sv.run_psc, 3), (sv.run_ssc, 1)):
        rec = run(prob, fam, sv.SolverConfig(max_outer_iters=10, record_timing=False, workers=workers, seed=seed),
                  sine_start(mesh))
        buf = io.StringIO()
        buf.write("n,F,zeta,seminorm_err,wall_ms\n")
        for n, F in enumerate(rec.energies):
            buf.write(",".join(format(v, ".17g") for v in (n, F, rec.zetas[n], rec.seminorm_errors[n],
                                                             rec.wall_times[n])) + "\n")
        out.append(buf.getvalue())
    est = th.estimate_ck0(prob, fam, th.SampleSpec(count=8, seed=seed, u0=sine_start(mesh)))
    return out[0], out[1] + out[2] + repr(est)


def test_c10_determinism(tmp_path):
    t0 = time.perf_counter()
    a1, b1 = _csv_bytes(4)
    a2, b2 = _csv_bytes(4)
    mesh = fc.build_interval_mesh(32)
    prob = pb.slaplace_problem(mesh, 2.0, smooth_load(mesh))
    fam = family_for(mesh, True)
    files = []
    for k in range(2):
        rec = sv.run_psc(prob, fam, sv.SolverConfig(max_outer_iters=8, record_timing=False), sine_start(mesh))
        path = tmp_path / f"run{k}.csv"
        rec.to_csv(path)
        files.append(path.read_bytes())
    ok = a1 == a2 and b1 == b2 and files[0] == files[1] and a1 == b1[: len(a1)]
    report("C10", ok, "repeated seeded runs give identical CSV bytes (serial, threaded PSC, SSC, estimator)", t0)
