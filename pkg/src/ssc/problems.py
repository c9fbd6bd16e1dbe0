"""
Semicoercive and nearly semicoercive energies on P1 spaces.

Three kinds are supported:

``quadratic``
    F(v) = 1/2 v^T A v - f^T v for a user-supplied symmetric positive
    semidefinite matrix A with a declared kernel.
``slaplace``
    F(v) = 1/s int |grad v|^s - <f, v> with pure Neumann conditions; the
    kernel is span{1}.
``perturbed``
    F(v) = F_0(v) + eps/2 int v^2, with F_0 the s-Laplace energy above.

Functions at module level take :class:`~ssc.fem_core.FeFunction` arguments
and validate them; methods with an ``_x`` suffix work on raw coefficient
arrays and are what the solvers call.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp

from . import _kernels
from .errors import InvalidArgumentError
from .fem_core import DualVector, FeFunction, constant, same_space

_EPS = np.finfo(float).eps

KINDS = ("quadratic", "slaplace", "perturbed")


@dataclass(eq=False)
class SemicoerciveProblem:
    """
    Energy functional together with its seminorm and kernel.

    Use :func:`quadratic_problem`, :func:`slaplace_problem` or
    :func:`perturbed_problem` rather than calling this directly.

    Attributes
    ----------
    kind : str
        One of ``"quadratic"``, ``"slaplace"``, ``"perturbed"``.
    mesh : Mesh
    f : DualVector
    s : float
        Exponent of the s-Laplace term (2 for quadratic problems).
    eps : float
        Weight of the L2 perturbation (0 unless ``kind == "perturbed"``).
    A : sparse matrix or None
        System matrix of a quadratic problem.
    kernel_basis : list of FeFunction
        Basis of the kernel of the semicoercive part.
    p, q : float
        Sharpness and smoothness exponents.
    """

    kind: str
    mesh: object
    f: DualVector
    s: float = 2.0
    eps: float = 0.0
    A: object = None
    kernel_basis: list = field(default_factory=list)
    p: float = 2.0
    q: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown problem kind {self.kind!r}")
        if not same_space(self.f.mesh, self.mesh):
            raise InvalidArgumentError("load vector lives on a different mesh")
        if self.kind != "quadratic" and not self.s > 1:
            raise InvalidArgumentError(f"s must exceed 1, got {self.s}")
        if self.eps < 0:
            raise InvalidArgumentError(f"eps must be nonnegative, got {self.eps}")
        mesh = self.mesh
        self._all_elements = np.arange(mesh.n_elements, dtype=np.int64)
        self._identity_map = np.arange(mesh.n_vertices, dtype=np.int64)
        self._fv = self.f.values

    # --- structure -------------------------------------------------------

    @property
    def is_coercive(self):
        """True when the full energy has a trivial kernel."""
        if self.kind == "perturbed" and self.eps > 0:
            return True
        return len(self.kernel_basis) == 0

    @property
    def energy_kernel(self):
        """Kernel of the full energy as an (nv, k) array."""
        if self.is_coercive:
            return np.zeros((self.mesh.n_vertices, 0))
        return self.kernel_matrix

    @property
    def kernel_matrix(self):
        """Kernel of the semicoercive part as an (nv, k) array."""
        if not self.kernel_basis:
            return np.zeros((self.mesh.n_vertices, 0))
        return np.column_stack([phi.coeffs for phi in self.kernel_basis])

    @property
    def semi_exponent(self):
        """Exponent of the problem seminorm."""
        return 2.0 if self.kind == "quadratic" else self.s

    # --- coefficient-level oracles ---------------------------------------

    def _gradient_part(self, x):
        m = self.mesh
        return _kernels.patch_energy(x, m.elements, m.grad_basis, m.areas, self.s, self._all_elements)

    def _flux(self, x):
        m = self.mesh
        out = np.zeros(m.n_vertices)
        _kernels.patch_flux(
            x, m.elements, m.grad_basis, m.areas, self.s, self._all_elements, self._identity_map, out
        )
        return out

    def energy_x(self, x):
        if self.kind == "quadratic":
            return float(0.5 * x @ (self.A @ x) - self._fv @ x)
        val = self._gradient_part(x) - self._fv @ x
        if self.eps:
            val += 0.5 * self.eps * float(x @ (self.mesh.mass_matrix @ x))
        return float(val)

    def gradient_x(self, x):
        if self.kind == "quadratic":
            return self.A @ x - self._fv
        g = self._flux(x) - self._fv
        if self.eps:
            g = g + self.eps * (self.mesh.mass_matrix @ x)
        return g

    def hessian_x(self, x, gamma=0.0):
        """Sparse Hessian; the s-Laplace part uses |grad v|^2 + gamma^2."""
        if self.kind == "quadratic":
            return sp.csr_matrix(self.A)
        H = _slaplace_hessian_sparse(self.mesh, x, self.s, gamma)
        if self.eps:
            H = H + self.eps * self.mesh.mass_matrix
        return H.tocsr()

    def seminorm_x(self, x):
        if self.kind == "quadratic":
            return float(np.sqrt(max(x @ (self.A @ x), 0.0)))
        return (self.s * self._gradient_part(x)) ** (1.0 / self.s)

    def bregman_x(self, x, w, part="full"):
        """
        Bregman distance d_F(w; x).

        ``part`` selects ``"full"``, ``"semicoercive"`` (F_0) or
        ``"perturbation"`` (F_1 = 1/2 ||.||_{L2}^2) for perturbed problems.
        """
        if self.kind == "quadratic":
            return float(0.5 * w @ (self.A @ w))
        mass = 0.5 * float(w @ (self.mesh.mass_matrix @ w))
        if part == "perturbation":
            return mass
        val = _slaplace_bregman(self.mesh, x, w, self.s)
        if part == "full" and self.eps:
            val += self.eps * mass
        return val

    def restrict(self, x, sub):
        """Local energy F(x + B y) - F(x) on the subspace `sub`."""
        return LocalProblem(self, x, sub)


def quadratic_problem(mesh, A, f=None, kernel_basis=()):
    """F(v) = 1/2 v^T A v - f^T v with a declared kernel of A."""
    A = sp.csr_matrix(A, dtype=float)
    if A.shape != (mesh.n_vertices, mesh.n_vertices):
        raise InvalidArgumentError(f"matrix shape {A.shape} does not match the mesh")
    if abs(A - A.T).max() > 1e-12 * max(1.0, abs(A).max()):
        raise InvalidArgumentError("quadratic problem matrix must be symmetric")
    if f is None:
        f = DualVector(mesh, np.zeros(mesh.n_vertices))
    return SemicoerciveProblem(
        kind="quadratic", mesh=mesh, f=f, s=2.0, A=A, kernel_basis=list(kernel_basis), p=2.0, q=2.0
    )


def slaplace_problem(mesh, s, f=None):
    """Pure Neumann s-Laplace energy; kernel span{1}."""
    if f is None:
        f = DualVector(mesh, np.zeros(mesh.n_vertices))
    return SemicoerciveProblem(
        kind="slaplace", mesh=mesh, f=f, s=float(s), kernel_basis=[constant(mesh)],
        p=max(s, 2.0), q=min(s, 2.0),
    )


def perturbed_problem(mesh, s, eps, f=None):
    """s-Laplace energy plus (eps/2) ||v||_{L2}^2."""
    if f is None:
        f = DualVector(mesh, np.zeros(mesh.n_vertices))
    return SemicoerciveProblem(
        kind="perturbed", mesh=mesh, f=f, s=float(s), eps=float(eps), kernel_basis=[constant(mesh)],
        p=max(s, 2.0), q=min(s, 2.0),
    )


def _slaplace_bregman(mesh, x, w, s):
    G = mesh.grad_basis
    gv = np.einsum("ta,tak->tk", x[mesh.elements], G)
    gw = np.einsum("ta,tak->tk", w[mesh.elements], G)
    nv2 = np.einsum("tk,tk->t", gv, gv)
    nt = np.sqrt(np.einsum("tk,tk->t", gv + gw, gv + gw))
    nv = np.sqrt(nv2)
    coef = np.zeros_like(nv)
    nz = nv2 > 0
    coef[nz] = nv[nz] ** (s - 2.0)
    terms = (nt**s - nv**s) / s - coef * np.einsum("tk,tk->t", gv, gw)
    return float(np.sum(np.maximum(terms, 0.0) * mesh.areas))


def _slaplace_hessian_sparse(mesh, x, s, gamma):
    G = mesh.grad_basis
    g = np.einsum("ta,tak->tk", x[mesh.elements], G)
    r = np.einsum("tk,tk->t", g, g) + gamma * gamma
    if s == 2.0:
        a = np.ones_like(r)
        b = np.zeros_like(r)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            a = r ** (0.5 * (s - 2.0))
            b = (s - 2.0) * r ** (0.5 * (s - 4.0))
        b[r == 0] = 0.0
    GG = np.einsum("tak,tbk->tab", G, G)
    gG = np.einsum("tk,tak->ta", g, G)
    blk = mesh.areas[:, None, None] * (a[:, None, None] * GG + b[:, None, None] * gG[:, :, None] * gG[:, None, :])
    return mesh._assemble(blk)


class LocalProblem:
    """
    Energy of a problem restricted to an affine subspace x + range(B).

    All values are differences F(x + B y) - F(x) so that line searches are
    not polluted by the magnitude of F itself. ``sub`` must provide
    ``basis`` (sparse nv x m), ``patch`` (element indices touching the
    subspace) and ``gl_map``. A coordinate subspace passes the local number
    of every fine vertex (-1 outside) and is assembled on its patch only;
    ``gl_map=None`` assembles globally and applies the basis afterwards.
    """

    def __init__(self, prob, x, sub):
        self.prob = prob
        self.x = np.asarray(x, dtype=float)
        self.sub = sub
        self.B = sub.basis
        self.m = self.B.shape[1]
        self.f_loc = self.B.T @ prob.f.values
        if prob.kind == "quadratic":
            Ab = prob.A @ self.B
            self.A_loc = _dense(self.B.T @ Ab)
            self.r_loc = self.B.T @ (prob.A @ self.x) - self.f_loc
            return
        mesh = prob.mesh
        self._args = (mesh.elements, mesh.grad_basis, mesh.areas)
        self.e0 = _kernels.patch_energy(self.x, *self._args, prob.s, sub.patch)
        if prob.eps:
            MB = mesh.mass_matrix @ self.B
            self.M_loc = _dense(self.B.T @ MB)
            self.Mx_loc = self.B.T @ (mesh.mass_matrix @ self.x)

    def point(self, y):
        return self.x + self.B @ y

    def delta(self, y):
        prob = self.prob
        if prob.kind == "quadratic":
            return float(y @ self.r_loc + 0.5 * y @ (self.A_loc @ y))
        e1 = _kernels.patch_energy(self.point(y), *self._args, prob.s, self.sub.patch)
        val = e1 - self.e0 - self.f_loc @ y
        if prob.eps:
            val += prob.eps * (y @ self.Mx_loc + 0.5 * y @ (self.M_loc @ y))
        return float(val)

    def grad(self, y):
        prob = self.prob
        if prob.kind == "quadratic":
            return self.r_loc + self.A_loc @ y
        if self.sub.gl_map is None:
            return self.B.T @ prob.gradient_x(self.point(y))
        out = np.zeros(self.m)
        _kernels.patch_flux(self.point(y), *self._args, prob.s, self.sub.patch, self.sub.gl_map, out)
        g = out - self.f_loc
        if prob.eps:
            g = g + prob.eps * (self.Mx_loc + self.M_loc @ y)
        return g

    def hess(self, y, gamma=0.0):
        prob = self.prob
        if prob.kind == "quadratic":
            return self.A_loc
        if self.sub.gl_map is None:
            return _dense(self.B.T @ (prob.hessian_x(self.point(y), gamma) @ self.B))
        H = np.zeros((self.m, self.m))
        _kernels.patch_hessian(self.point(y), *self._args, prob.s, gamma, self.sub.patch, self.sub.gl_map, H)
        if prob.eps:
            H = H + prob.eps * self.M_loc
        return H

    def grad_floor(self, y, H):
        """Rounding level of ``grad(y)``; it grows with |x + B y|, not |y|."""
        z = float(np.abs(self.point(y)).max())
        rows = np.abs(np.asarray(H)).sum(axis=1)
        return 256.0 * _EPS * float(np.linalg.norm(rows * z + np.abs(self.f_loc)))

    def energy_scale(self):
        """Magnitude used to size roundoff slack in line searches."""
        if self.prob.kind == "quadratic":
            return 1.0 + abs(float(self.x @ (self.prob.A @ self.x)))
        return 1.0 + abs(self.e0) + abs(float(self.f_loc @ self.f_loc)) ** 0.5


class PowerModelProblem:
    """
    Inexact local model <F'(x), B y> + (M/r) ||B y||^r.

    The norm is (|w|^r + ||w||_{L2}^r)^(1/r) with |.| the problem
    seminorm. Values are again differences from the model value at y = 0,
    which equals F(x).
    """

    def __init__(self, prob, x, sub, M, r, full_grad=None):
        if not M > 0 or not r > 1:
            raise InvalidArgumentError("power model needs M > 0 and exponent > 1")
        self.prob = prob
        self.x = np.asarray(x, dtype=float)
        self.sub = sub
        self.B = sub.basis
        self.m = self.B.shape[1]
        self.M = float(M)
        self.r = float(r)
        g = prob.gradient_x(self.x) if full_grad is None else full_grad
        self.g_loc = self.B.T @ g
        mesh = prob.mesh
        MB = mesh.mass_matrix @ self.B
        self.Mass_loc = _dense(self.B.T @ MB)
        if prob.kind == "quadratic":
            Ab = prob.A @ self.B
            self.A_loc = _dense(self.B.T @ Ab)
        else:
            self._args = (mesh.elements, mesh.grad_basis, mesh.areas)

    # seminorm^s_semi of B y with its derivatives in y
    def _semi(self, y, want_hess=False, gamma=0.0):
        prob = self.prob
        if prob.kind == "quadratic":
            Ay = self.A_loc @ y
            a = float(y @ Ay)
            return a, 2.0 * Ay, (2.0 * self.A_loc if want_hess else None)
        s = prob.s
        w = self.B @ y
        a = s * _kernels.patch_energy(w, *self._args, s, self.sub.patch)
        mesh = prob.mesh
        Ha = None
        if self.sub.gl_map is None:
            flux = np.zeros(mesh.n_vertices)
            _kernels.patch_flux(w, *self._args, s, self.sub.patch, prob._identity_map, flux)
            da = s * (self.B.T @ flux)
            if want_hess:
                Ha = s * _dense(self.B.T @ (_slaplace_hessian_sparse(mesh, w, s, gamma) @ self.B))
            return a, da, Ha
        flux = np.zeros(self.m)
        _kernels.patch_flux(w, *self._args, s, self.sub.patch, self.sub.gl_map, flux)
        da = s * flux
        if want_hess:
            Ha = np.zeros((self.m, self.m))
            _kernels.patch_hessian(w, *self._args, s, gamma, self.sub.patch, self.sub.gl_map, Ha)
            Ha *= s
        return a, da, Ha

    def norm_power(self, y):
        """||B y||^r in the model norm."""
        a, _, _ = self._semi(y)
        b = float(y @ (self.Mass_loc @ y))
        return a ** (self.r / self.prob.semi_exponent) + b ** (0.5 * self.r)

    def delta(self, y):
        return float(self.g_loc @ y + self.M / self.r * self.norm_power(y))

    def grad(self, y):
        r, se = self.r, self.prob.semi_exponent
        a, da, _ = self._semi(y)
        My = self.Mass_loc @ y
        b = float(y @ My)
        g = self.g_loc.copy()
        if a > 0:
            g += self.M / self.r * (r / se) * a ** (r / se - 1.0) * da
        if b > 0:
            g += self.M * b ** (0.5 * r - 1.0) * My
        return g

    def model_grad(self, y):
        """Gradient of the model minus F'(x): the derivative of d_j."""
        return self.grad(y) - self.g_loc

    def hess(self, y, gamma=0.0):
        r, se = self.r, self.prob.semi_exponent
        a, da, Ha = self._semi(y, want_hess=True, gamma=gamma)
        My = self.Mass_loc @ y
        b = float(y @ My)
        reg = gamma * gamma
        ar, br_ = a + reg, b + reg
        c = self.M / r
        H = c * (r / se) * ar ** (r / se - 1.0) * Ha
        H += c * (r / se) * (r / se - 1.0) * ar ** (r / se - 2.0) * np.outer(da, da)
        H += self.M * br_ ** (0.5 * r - 1.0) * self.Mass_loc
        H += self.M * (r - 2.0) * br_ ** (0.5 * r - 2.0) * np.outer(My, My)
        return H

    def energy_scale(self):
        return 1.0 + float(np.linalg.norm(self.g_loc))


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def model_norm(prob, w, r):
    """(|w|^r + ||w||_{L2}^r)^(1/r), the norm of the power model."""
    semi = prob.seminorm_x(w)
    l2 = float(np.sqrt(max(w @ (prob.mesh.mass_matrix @ w), 0.0)))
    return (semi**r + l2**r) ** (1.0 / r)


# --- validated FeFunction-level API ---------------------------------------


def _coeffs(prob, v):
    if not isinstance(v, FeFunction):
        raise InvalidArgumentError("expected an FeFunction")
    if not same_space(v.mesh, prob.mesh):
        raise InvalidArgumentError("function lives on a different mesh than the problem")
    return v.coeffs


def energy(prob, v):
    return prob.energy_x(_coeffs(prob, v))


def gradient(prob, v):
    return DualVector(prob.mesh, prob.gradient_x(_coeffs(prob, v)))


def bregman(prob, v, w, part="full"):
    return prob.bregman_x(_coeffs(prob, v), _coeffs(prob, w), part=part)


def seminorm(prob, v):
    return prob.seminorm_x(_coeffs(prob, v))


def check_compatibility(prob, tol=1e-12):
    """True iff <f, phi> vanishes for every kernel function of the energy."""
    if prob.is_coercive:
        return True
    fv = prob.f.values
    scale = max(1.0, float(np.linalg.norm(fv)))
    return all(abs(float(fv @ phi.coeffs)) <= tol * scale * max(1.0, float(np.linalg.norm(phi.coeffs)))
               for phi in prob.kernel_basis)
