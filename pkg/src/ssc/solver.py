"""
Parallel and successive subspace correction.

Local problems are minimized by a damped Newton method whose step length
comes from a line search on the directional derivative, with Armijo
backtracking on the exact energy as a fallback. Hessians of the s-Laplace term use the
regularized modulus |grad v|^2 + gamma^2; energies and gradients are never
modified. Singular local Hessians (a subspace that contains part of the
energy kernel) are handled by bordering with the local kernel basis, which
returns the minimum-norm Newton step orthogonal to the kernel.
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import sparse as sp
from scipy.sparse import linalg as spla

from .decomposition import color_subdomains
from .errors import (
    FailedPreconditionError,
    InvalidArgumentError,
    InvariantViolationError,
    SolverError,
)
from .fem_core import FeFunction, element_gradients, same_space
from .problems import LocalProblem, PowerModelProblem, check_compatibility

_EPS = np.finfo(float).eps
LOCAL_KINDS = ("exact", "inexact_power")


@dataclass
class SolverConfig:
    """
    Parameters of a subspace correction run.

    Attributes
    ----------
    tau : float or None
        PSC step size; None takes the coloring lower bound.
    max_outer_iters : int
    outer_tol : float
        Stop once zeta_n <= outer_tol * zeta_0.
    local_kind : {"exact", "inexact_power"}
    M, s_loc : float
        Parameters of the inexact power model.
    inner_max_iters : int
    inner_grad_tol : float
        Local gradients are driven below inner_grad_tol * (1 + ||F'(v)||).
    newton_regularization : float or None
        Hessian regularization gamma; None uses 1e-10 * (1 + |v|).
    seed : int
    workers : int
        Threads used for the PSC local solves.
    override_tau : bool
        Allow tau above the coloring bound.
    record_timing : bool
        If False, wall times are recorded as 0 so CSV output is reproducible.
    """

    tau: float = None
    max_outer_iters: int = 500
    outer_tol: float = 1e-10
    local_kind: str = "exact"
    M: float = 4.0
    s_loc: float = 2.0
    inner_max_iters: int = 100
    inner_grad_tol: float = 1e-10
    newton_regularization: float = None
    seed: int = 0
    workers: int = 1
    override_tau: bool = False
    record_timing: bool = True

    def __post_init__(self):
        if self.tau is not None and not 0 < self.tau <= 1:
            raise InvalidArgumentError(f"tau must lie in (0, 1], got {self.tau}")
        if self.local_kind not in LOCAL_KINDS:
            raise InvalidArgumentError(f"unknown local solver {self.local_kind!r}")
        if not self.outer_tol > 0 or not self.inner_grad_tol > 0:
            raise InvalidArgumentError("tolerances must be positive")
        if int(self.max_outer_iters) < 0 or int(self.inner_max_iters) < 1:
            raise InvalidArgumentError("iteration limits must be nonnegative")
        if self.local_kind == "inexact_power" and not (self.M > 0 and self.s_loc > 1):
            raise InvalidArgumentError("inexact_power needs M > 0 and s_loc > 1")
        if self.newton_regularization is not None and self.newton_regularization < 0:
            raise InvalidArgumentError("newton_regularization must be nonnegative")
        if int(self.workers) < 1:
            raise InvalidArgumentError("workers must be at least 1")


@dataclass(eq=False)
class RunRecord:
    """
    History of one subspace correction run.

    ``zetas[n] = energies[n] - f_ref``. ``flags`` collects notes such as
    ``"f_ref_best_seen"`` when no oracle reference was available.
    """

    method: str
    tau: float
    energies: list = field(default_factory=list)
    zetas: list = field(default_factory=list)
    seminorm_errors: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    substep_energies: list = field(default_factory=list)
    inexact_log: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    f_ref: float = float("nan")
    r0_empirical: float = float("nan")
    iters_to_tol: int = None
    final_iterate: FeFunction = None
    flags: list = field(default_factory=list)
    slack: float = 0.0

    @property
    def n_iters(self):
        return max(len(self.energies) - 1, 0)

    @property
    def converged(self):
        return self.iters_to_tol is not None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["n", "F", "zeta", "seminorm_err", "wall_ms"])
            for n, F in enumerate(self.energies):
                writer.writerow([
                    n, _fmt(F), _fmt(self.zetas[n]), _fmt(self.seminorm_errors[n]), _fmt(self.wall_times[n]),
                ])

    def summary(self):
        return {
            "method": self.method,
            "tau": self.tau,
            "n_iters": self.n_iters,
            "iters_to_tol": self.iters_to_tol,
            "converged": self.converged,
            "r0_empirical": self.r0_empirical,
            "f_ref": self.f_ref,
            "final_energy": self.energies[-1] if self.energies else None,
            "final_zeta": self.zetas[-1] if self.zetas else None,
            "descent_ok": descent_check(self),
            "flags": list(self.flags),
        }


def _fmt(x):
    return format(float(x), ".17g")


def descent_check(record, rel_slack=1e-12):
    """True iff energies (and SSC sub-step energies) never increase beyond slack."""
    E = list(record.energies)
    if not E:
        return True
    slack = rel_slack * (1.0 + abs(E[0]))
    if any(b > a + slack for a, b in zip(E, E[1:])):
        return False
    for sweep in record.substep_energies:
        if any(b > a + slack for a, b in zip(sweep, sweep[1:])):
            return False
    return True


# --- damped Newton ---------------------------------------------------------


def _orthonormal(Z):
    if Z is None or Z.shape[1] == 0:
        return None
    Q, _ = np.linalg.qr(Z)
    return Q


def _newton_direction(H, g, Q):
    if Q is None:
        if sp.issparse(H):
            return -spla.spsolve(H.tocsc(), g)
        try:
            return -sla.cho_solve(sla.cho_factor(H, check_finite=False), g, check_finite=False)
        except (sla.LinAlgError, ValueError):
            return -np.linalg.lstsq(H, g, rcond=None)[0]
    n, k = Q.shape
    if sp.issparse(H):
        scale = np.sqrt(max(H.diagonal().mean(), _EPS))
        K = sp.bmat([[H, sp.csr_matrix(scale * Q)], [sp.csr_matrix(scale * Q.T), None]], format="csc")
        sol = spla.spsolve(K, np.concatenate([-g, np.zeros(k)]))
        return sol[:n]
    scale = np.sqrt(max(np.trace(H) / n, _EPS))
    K = np.block([[H, scale * Q], [scale * Q.T, np.zeros((k, k))]])
    rhs = np.concatenate([-g, np.zeros(k)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n]


def _wolfe_step(local, y, d, slope, c2=0.1, max_evals=200):
    """
    Step length along d with |phi'(t)| <= c2 |phi'(0)|, phi(t) = F(y + t d).

    Works on the directional derivative only. phi is convex, so phi' is
    nondecreasing and a sign change brackets the line minimum; this stays
    accurate long after energy differences have drowned in roundoff.
    Returns ``(t, grad at y + t d)``.
    """
    target = c2 * abs(slope)

    def dphi(t):
        g = local.grad(y + t * d)
        v = float(g @ d)
        return (v if np.isfinite(v) else np.inf), g

    lo, dlo = 0.0, slope
    t = 1.0
    dp, g = dphi(t)
    evals = 1
    if abs(dp) <= target:
        return t, g
    if dp < 0:
        # step too short: expand until the derivative changes sign
        while dp < 0 and evals < max_evals:
            lo, dlo = t, dp
            t *= 4.0
            dp, g = dphi(t)
            evals += 1
            if abs(dp) <= target:
                return t, g
        if dp < 0:
            return t, g
    else:
        while dp > 0 and evals < max_evals:
            hi = t
            t *= 0.25
            dp, g = dphi(t)
            evals += 1
            if abs(dp) <= target:
                return t, g
        if dp > 0:
            raise SolverError("line search found no descent")
        lo, dlo = t, dp
        t = hi
        dp, g = dphi(t)
        evals += 1
    hi, dhi = t, dp
    side = 0
    while evals < max_evals:
        w = hi - lo
        t = lo - dlo * w / (dhi - dlo) if np.isfinite(dhi) else 0.5 * (lo + hi)
        t = min(max(t, lo + 1e-3 * w), hi - 1e-3 * w)
        dp, g = dphi(t)
        evals += 1
        if abs(dp) <= target or w <= 1e-16 * hi:
            return t, g
        # Illinois modification keeps regula falsi from stalling on one side
        if dp < 0:
            lo, dlo = t, dp
            if side == -1:
                dhi *= 0.5
            side = -1
        else:
            hi, dhi = t, dp
            if side == 1:
                dlo *= 0.5
            side = 1
    return t, g


def damped_newton(local, tol, max_iter, gamma=0.0, kernel=None, y0=None, c1=1e-4, max_halvings=200, trace=None):
    """
    Minimize ``local.delta`` to projected gradient norm <= tol.

    ``local`` provides ``delta(y)``, ``grad(y)``, ``hess(y, gamma)`` and
    ``energy_scale()``; an optional ``grad_floor(y, H)`` gives the rounding
    level below which the residual is accepted. Steps come from a derivative-based line search;
    if that ever fails to decrease the energy (beyond roundoff), Armijo
    backtracking on the energy takes over. Returns ``(y, residual,
    iterations)``. If `trace` is a list, ``(iteration, residual, step,
    value)`` tuples are appended.
    """
    Q = _orthonormal(kernel)
    y = np.zeros(local.m) if y0 is None else np.array(y0, dtype=float)
    fy = local.delta(y)
    slack = 8.0 * _EPS * local.energy_scale()
    res = np.inf

    def project(g):
        return g if Q is None else g - Q @ (Q.T @ g)

    floor = getattr(local, "grad_floor", None)
    g = local.grad(y)
    for it in range(max_iter + 1):
        gp = project(g)
        res = float(np.linalg.norm(gp))
        if res <= tol:
            return y, res, it
        H = local.hess(y, gamma)
        if floor is not None and res <= floor(y, H):
            return y, res, it
        if it == max_iter:
            break
        d = _newton_direction(H, g, Q)
        slope = float(g @ d)
        if not np.all(np.isfinite(d)) or not slope < 0:
            d, slope = -gp, -res * res
        t, g_new = _wolfe_step(local, y, d, slope)
        y_new = y + t * d
        f_new = local.delta(y_new)
        if not f_new <= fy + slack:
            t = 1.0
            dnorm = float(np.linalg.norm(d))
            ynorm = float(np.linalg.norm(y))
            for _ in range(max_halvings):
                y_new = y + t * d
                f_new = local.delta(y_new)
                if f_new <= fy + c1 * t * slope:
                    break
                t *= 0.5
                if t * dnorm <= 1e-17 * (1.0 + ynorm):
                    raise SolverError("line search stalled", residual=res)
            else:
                raise SolverError("line search failed", residual=res)
            g_new = local.grad(y_new)
        y, fy, g = y_new, f_new, g_new
        if trace is not None:
            trace.append((it, res, t, fy))
    raise SolverError(f"damped Newton stopped at residual {res:.3e} > {tol:.3e}", residual=res)


# --- local solves ----------------------------------------------------------


class _Context:
    """Per-run cache of local kernels, tolerances and the full gradient."""

    def __init__(self, prob, family, cfg):
        if not same_space(prob.mesh, family.mesh):
            raise InvalidArgumentError("problem and decomposition use different meshes")
        self.prob = prob
        self.family = family
        self.cfg = cfg
        self._kernels = {}

    def local_kernel(self, sub):
        """Coefficients (in the subspace basis) spanning V_j intersected with the energy kernel."""
        key = sub.index
        if key in self._kernels:
            return self._kernels[key]
        Phi = self.prob.energy_kernel
        Z = None
        if Phi.shape[1]:
            if sub.dofs is not None:
                outside = np.ones(Phi.shape[0], dtype=bool)
                outside[sub.dofs] = False
                A = sla.null_space(Phi[outside]) if outside.any() else np.eye(Phi.shape[1])
                if A.size:
                    Z = Phi[sub.dofs] @ A
            else:
                B = sub.basis.toarray()
                N = sla.null_space(np.hstack([B, -Phi]))
                if N.size:
                    Z = N[: B.shape[1]]
        self._kernels[key] = Z
        return Z

    def gamma(self, x):
        if self.cfg.newton_regularization is not None:
            return self.cfg.newton_regularization
        return 1e-10 * (1.0 + self.prob.seminorm_x(x))


def _solve_local(ctx, sub, x, g_full, want_log=False):
    cfg, prob = ctx.cfg, ctx.prob
    tol = cfg.inner_grad_tol * (1.0 + float(np.linalg.norm(g_full)))
    gamma = ctx.gamma(x)
    if cfg.local_kind == "exact":
        local = LocalProblem(prob, x, sub)
        y, _, _ = damped_newton(local, tol, cfg.inner_max_iters, gamma, kernel=ctx.local_kernel(sub))
        return sub.extend(y), None
    model = PowerModelProblem(prob, x, sub, cfg.M, cfg.s_loc, full_grad=g_full)
    y0 = _power_start(model)
    y, _, _ = damped_newton(model, tol, cfg.inner_max_iters, gamma, y0=y0)
    w = sub.extend(y)
    log = None
    if want_log:
        exact = LocalProblem(prob, x, sub)
        decrease = -exact.delta(y)
        log = {
            "subspace": sub.index,
            "decrease": decrease,
            "dj_prime_dot": float(model.model_grad(y) @ y),
            "d_F": float(exact.delta(y) - model.g_loc @ y),
            "d_j": float(model.M / model.r * model.norm_power(y)),
        }
    return w, log


def _power_start(model):
    """Exact minimizer of the model along a Gram-preconditioned gradient step."""
    g = model.g_loc
    if not np.any(g):
        return np.zeros_like(g)
    prob = model.prob
    B = model.B
    K = prob.A if prob.kind == "quadratic" else prob.mesh.stiffness_matrix
    G = model.Mass_loc + sp.csr_matrix(B.T @ (K @ B)).toarray()
    d = -np.linalg.solve(G, g)
    nd = model.norm_power(d)
    slope = -float(g @ d)
    if nd <= 0 or slope <= 0:
        return np.zeros_like(g)
    # the model along t d is -t slope + (M/r) t^r nd, minimized in closed form
    t = (slope / (model.M * nd)) ** (1.0 / (model.r - 1.0))
    return t * d


def _validate(prob, family, cfg, u0):
    if not isinstance(u0, FeFunction) or not same_space(u0.mesh, prob.mesh):
        raise InvalidArgumentError("u0 must be an FeFunction on the problem mesh")
    if not check_compatibility(prob):
        raise FailedPreconditionError("load is incompatible with the energy kernel; F is unbounded below")
    family.check_covering()
    tau_lower = color_subdomains(family).tau_lower
    tau = tau_lower if cfg.tau is None else float(cfg.tau)
    if tau > tau_lower * (1 + 1e-12) and not cfg.override_tau:
        raise InvalidArgumentError(f"tau = {tau} exceeds the coloring bound {tau_lower}; set override_tau")
    return tau


def local_solve_exact(prob, family, j, v, cfg):
    """Minimize F(v + w) over w in V_j."""
    ctx = _Context(prob, family, cfg)
    x = v.coeffs
    w, _ = _solve_local(ctx, family.subspace(j), x, prob.gradient_x(x))
    return FeFunction(prob.mesh, w)


def local_solve_inexact_power(prob, family, j, v, M, s_loc, cfg):
    """Minimize F(v) + <F'(v), w> + (M/s_loc) ||w||^s_loc over w in V_j."""
    local_cfg = SolverConfig(**{**cfg.__dict__, "local_kind": "inexact_power", "M": M, "s_loc": s_loc})
    ctx = _Context(prob, family, local_cfg)
    x = v.coeffs
    w, _ = _solve_local(ctx, family.subspace(j), x, prob.gradient_x(x))
    return FeFunction(prob.mesh, w)


def suggest_power_model(prob, u0, safety=2.0):
    """
    Pick (M, s_loc) for inexact_power locals from the data at `u0`.

    For s < 2 the model keeps the growth of the energy (s_loc = s, M = 1).
    For s >= 2 it is quadratic with M a multiple of the size of the
    s-Laplacian Hessian coefficient (s - 1)|grad u0|^(s - 2).
    """
    s = prob.semi_exponent
    if s < 2.0:
        return 1.0, float(s)
    g = element_gradients(u0).reshape(prob.mesh.n_elements, -1)
    gmax = float(np.max(np.linalg.norm(g, axis=1))) if g.size else 0.0
    return safety * max(s - 1.0, 1.0) * max(1.0, gmax) ** (s - 2.0), 2.0


# --- global oracle ---------------------------------------------------------


class _GlobalView:
    def __init__(self, prob, scale):
        self.prob = prob
        self.m = prob.mesh.n_vertices
        self.scale = scale

    def delta(self, y):
        return self.prob.energy_x(y)

    def grad(self, y):
        return self.prob.gradient_x(y)

    def hess(self, y, gamma=0.0):
        return self.prob.hessian_x(y, gamma)

    def energy_scale(self):
        return 1.0 + self.scale

    def grad_floor(self, y, H):
        # size of the rounding error in the assembled gradient at y
        Habs = abs(sp.csr_matrix(H))
        return 256.0 * _EPS * float(np.linalg.norm(Habs @ np.abs(y) + np.abs(self.prob.f.values)))


def _kernel_normalize(prob, x):
    Phi = prob.energy_kernel
    if Phi.shape[1] == 0:
        return x
    M = prob.mesh.mass_matrix
    G = Phi.T @ (M @ Phi)
    c = np.linalg.solve(G, Phi.T @ (M @ x))
    return x - Phi @ c


def global_newton_oracle(prob, u0=None, tol=1e-11, max_iter=200, gamma=None):
    """
    Reference minimizer by damped Newton on the full space.

    For singular problems the gradient is measured off the kernel and the
    result is shifted to have zero mass-weighted projection onto it.
    """
    nv = prob.mesh.n_vertices
    x0 = np.zeros(nv) if u0 is None else np.array(u0.coeffs, dtype=float)
    if not check_compatibility(prob):
        raise FailedPreconditionError("load is incompatible with the energy kernel")
    view = _GlobalView(prob, abs(prob.energy_x(x0)) + float(np.abs(prob.f.values).sum()))
    scale_tol = tol * (1.0 + float(np.linalg.norm(prob.f.values)))
    if gamma is None:
        gamma = 1e-10 * (1.0 + prob.seminorm_x(x0))
    y, _, _ = damped_newton(view, scale_tol, max_iter, gamma, kernel=prob.energy_kernel, y0=x0)
    return FeFunction(prob.mesh, _kernel_normalize(prob, y))


# --- outer iterations ------------------------------------------------------


def _reference(prob, u0, reference, record):
    if reference is not None:
        return reference.coeffs, prob.energy_x(reference.coeffs)
    try:
        u = global_newton_oracle(prob, u0)
    except SolverError:
        record.flags.append("f_ref_best_seen")
        return None, None
    if not prob.energy_kernel.shape[1] == 0:
        record.flags.append("kernel_normalized_reference")
    return u.coeffs, prob.energy_x(u.coeffs)


def _run(prob, family, cfg, u0, reference, method):
    tau = _validate(prob, family, cfg, u0)
    ctx = _Context(prob, family, cfg)
    subs = family.all_subspaces
    record = RunRecord(method=method, tau=tau if method == "psc" else 1.0)
    u_ref, f_ref = _reference(prob, u0, reference, record)
    x = u0.coeffs.copy()
    F = prob.energy_x(x)
    slack = 1e-12 * (1.0 + abs(F))
    record.slack = slack
    energies, xs, times = [F], [x.copy()], [0.0]
    want_log = cfg.local_kind == "inexact_power"
    pool = ThreadPoolExecutor(cfg.workers) if method == "psc" and cfg.workers > 1 else None
    t0 = time.perf_counter()

    def target_reached(F_cur):
        if f_ref is None:
            return False
        zeta0 = energies[0] - f_ref
        floor = 64.0 * _EPS * (1.0 + abs(f_ref))
        return F_cur - f_ref <= max(cfg.outer_tol * zeta0, floor)

    try:
        for n in range(int(cfg.max_outer_iters)):
            if target_reached(F):
                break
            try:
                if method == "psc":
                    g_full = prob.gradient_x(x)
                    work = lambda sub: _solve_local(ctx, sub, x, g_full, want_log)
                    results = list(pool.map(work, subs)) if pool else [work(sub) for sub in subs]
                    # reduce in index order so the sum does not depend on scheduling
                    total = np.zeros_like(x)
                    for w, log in results:
                        total += w
                        if log is not None:
                            record.inexact_log.append({**log, "iteration": n})
                    x = x + tau * total
                    F_new = prob.energy_x(x)
                else:
                    sweep = [F]
                    for sub in subs:
                        w, log = _solve_local(ctx, sub, x, prob.gradient_x(x), want_log)
                        x = x + w
                        sweep.append(prob.energy_x(x))
                        if log is not None:
                            record.inexact_log.append({**log, "iteration": n})
                        if sweep[-1] > sweep[-2] + slack:
                            raise InvariantViolationError(
                                f"energy increased in sub-step {sub.index} of sweep {n}: {sweep[-2]!r} -> {sweep[-1]!r}"
                            )
                    record.substep_energies.append(sweep)
                    F_new = sweep[-1]
            except SolverError as exc:
                exc.iteration = n
                raise
            if F_new > F + slack:
                raise InvariantViolationError(f"energy increased at iteration {n}: {F!r} -> {F_new!r}")
            F = F_new
            energies.append(F)
            xs.append(x.copy())
            times.append((time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0)
    finally:
        if pool:
            pool.shutdown()

    if f_ref is None:
        f_ref = min(energies)
        u_ref = xs[int(np.argmin(energies))]
    record.f_ref = f_ref
    record.energies = energies
    record.zetas = [E - f_ref for E in energies]
    record.seminorm_errors = [prob.seminorm_x(xi - u_ref) for xi in xs]
    record.r0_empirical = max(record.seminorm_errors)
    record.wall_times = times
    record.iterates = xs
    record.final_iterate = FeFunction(prob.mesh, x)
    zeta0 = record.zetas[0]
    floor = 64.0 * _EPS * (1.0 + abs(f_ref))
    for n, z in enumerate(record.zetas):
        if z <= max(cfg.outer_tol * zeta0, floor):
            record.iters_to_tol = n
            break
    return record


def run_psc(prob, family, cfg, u0, reference=None):
    """
    Parallel subspace correction: u <- u + tau * sum_j w_j.

    All local problems are posed at the same iterate, so they may run on
    worker threads; corrections are summed in subspace order.
    """
    return _run(prob, family, cfg, u0, reference, "psc")


def run_ssc(prob, family, cfg, u0, reference=None):
    """Successive subspace correction with full local steps, coarse space first."""
    return _run(prob, family, cfg, u0, reference, "ssc")
