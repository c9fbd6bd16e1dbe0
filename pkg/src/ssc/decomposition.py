"""
Overlapping decompositions of P1 spaces on the built-in uniform meshes.

Subdomains are axis-aligned boxes of the uniform grid extended by a number
of element layers. Local spaces V_j hold the P1 functions supported on the
vertices strictly inside the extended box (vertices on the box boundary are
dropped unless they lie on the domain boundary), so local corrections are
zero-extended. An optional coarse space V_0 is the nodal interpolant of a
coarser nested mesh.

Subspaces are labelled 0 (coarse) and 1..N (local) throughout.
"""

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
from scipy import linalg as sla
from scipy import sparse as sp

from .errors import FailedPreconditionError, InvalidArgumentError
from .fem_core import FeFunction, coarse_vertex_map, same_space


@dataclass(eq=False)
class Subspace:
    """
    One subspace V_j given by an explicit basis.

    Attributes
    ----------
    index : int
        0 for the coarse space, 1..N for local spaces.
    kind : str
        ``"coarse"`` or ``"local"``.
    basis : sparse matrix, shape (nv, m)
        Columns are the basis functions as fine-mesh coefficient vectors.
    patch : ndarray of int64
        Elements on which some basis function is nonzero.
    dofs : ndarray of int64 or None
        Fine vertices of a local space (its basis is the coordinate basis).
    gl_map : ndarray of int64 or None
        Local number of each fine vertex, -1 outside; None for the coarse
        space, whose operators are assembled globally.
    box : tuple of (lo, hi) pairs or None
        Extended grid box of a local space, one pair per axis.
    """

    index: int
    kind: str
    basis: object
    patch: np.ndarray
    dofs: np.ndarray = None
    gl_map: np.ndarray = None
    box: tuple = None

    @property
    def dim(self):
        return self.basis.shape[1]

    def extend(self, y):
        """Fine coefficient vector of the local coefficients y."""
        return self.basis @ y


@dataclass(eq=False)
class CoarseSpace:
    mesh: object
    prolongation: object


@dataclass(eq=False)
class SubspaceFamily:
    """
    Local subspaces and an optional coarse space on a fine mesh.

    Attributes
    ----------
    mesh : Mesh
    subspaces : list of Subspace
        Local spaces V_1..V_N.
    coarse : CoarseSpace or None
    n_per_axis : int
    overlap_layers : int
    H : float
        Subdomain width 1 / n_per_axis.
    delta : float
        Overlap parameter overlap_layers * h.
    H_layers, delta_layers : int
        The same two quantities in grid cells.
    warnings : list of str
    """

    mesh: object
    subspaces: list
    n_per_axis: int
    overlap_layers: int
    H: float
    delta: float
    H_layers: int
    delta_layers: int
    coarse: CoarseSpace = None
    coarse_subspace: Subspace = None
    warnings: list = field(default_factory=list)

    @property
    def n_local(self):
        return len(self.subspaces)

    @property
    def all_subspaces(self):
        """Coarse space first (if present), then the local spaces."""
        head = [self.coarse_subspace] if self.coarse_subspace is not None else []
        return head + list(self.subspaces)

    def subspace(self, j):
        for sub in self.all_subspaces:
            if sub.index == j:
                return sub
        raise InvalidArgumentError(f"no subspace with index {j}")

    @property
    def index_sets(self):
        return [sub.dofs for sub in self.subspaces]

    def check_covering(self, n_samples=5, seed=0, tol=1e-10):
        """
        Max least-squares residual of representing random functions in
        sum_j V_j; raises FailedPreconditionError above `tol`.
        """
        nv = self.mesh.n_vertices
        covered = np.zeros(nv, dtype=bool)
        for sub in self.subspaces:
            covered[sub.dofs] = True
        rest = np.flatnonzero(~covered)
        if rest.size == 0:
            return 0.0
        # local spaces absorb every covered vertex, so only the uncovered
        # rows have to be matched by the coarse space
        if self.coarse is None:
            raise FailedPreconditionError(f"{rest.size} vertices are not covered by any subspace")
        rng = np.random.default_rng(seed)
        P = self.coarse.prolongation[rest].toarray()
        V = rng.standard_normal((rest.size, n_samples))
        coef, *_ = np.linalg.lstsq(P, V, rcond=None)
        res = float(np.max(np.linalg.norm(P @ coef - V, axis=0) / np.linalg.norm(V, axis=0)))
        if res > tol:
            raise FailedPreconditionError(f"covering violated: residual {res:.3e}")
        return res

    def summary(self):
        col = color_subdomains(self)
        return {
            "n_subspaces": self.n_local,
            "has_coarse": self.coarse is not None,
            "H": self.H,
            "delta": self.delta,
            "H_layers": self.H_layers,
            "delta_layers": self.delta_layers,
            "n_colors": col.n_colors,
            "tau_lower": col.tau_lower,
            "warnings": list(self.warnings),
        }


@dataclass
class Coloring:
    colors: np.ndarray
    n_colors: int
    tau_lower: float


def _axis_range(i, m, layers, n):
    return max(0, i * m - layers), min(n, (i + 1) * m + layers)


def _axis_members(lo, hi, n):
    k = np.arange(lo, hi + 1)
    keep = ((k > lo) | (k == 0)) & ((k < hi) | (k == n))
    return k[keep]


def build_overlapping_dd(mesh, n_subdomains_per_axis, overlap_layers):
    """Boxes of width 1/N extended by `overlap_layers` element layers."""
    N = int(n_subdomains_per_axis)
    L = int(overlap_layers)
    if N < 1 or N != n_subdomains_per_axis:
        raise InvalidArgumentError(f"subdomains per axis must be a positive integer, got {n_subdomains_per_axis!r}")
    if L < 1 or L != overlap_layers:
        raise InvalidArgumentError(f"overlap layers must be a positive integer, got {overlap_layers!r}")
    n = mesh.n
    if n % N:
        raise InvalidArgumentError(f"resolution {n} is not divisible by {N} subdomains per axis")
    m = n // N
    nv = mesh.n_vertices
    adj = mesh.element_adjacency
    subs, warnings = [], []
    for idx, box_index in enumerate(product(range(N), repeat=mesh.dim)):
        # product iterates the last axis fastest; store boxes as (x, y, ...)
        box_index = box_index[::-1]
        box = tuple(_axis_range(i, m, L, n) for i in box_index)
        members = [_axis_members(lo, hi, n) for lo, hi in box]
        if mesh.dim == 1:
            dofs = members[0].astype(np.int64)
        else:
            ii, jj = np.meshgrid(members[0], members[1])
            dofs = np.sort((jj * (n + 1) + ii).ravel()).astype(np.int64)
        if N > 1 and all(lo == 0 and hi == n for lo, hi in box):
            warnings.append(f"subdomain {idx + 1} covers the whole domain")
        basis = sp.csc_matrix((np.ones(dofs.size), (dofs, np.arange(dofs.size))), shape=(nv, dofs.size))
        patch = np.unique(adj[dofs].indices).astype(np.int64)
        gl_map = np.full(nv, -1, dtype=np.int64)
        gl_map[dofs] = np.arange(dofs.size)
        subs.append(Subspace(index=idx + 1, kind="local", basis=basis, patch=patch, dofs=dofs, gl_map=gl_map, box=box))
    return SubspaceFamily(
        mesh=mesh, subspaces=subs, n_per_axis=N, overlap_layers=L, H=1.0 / N,
        delta=L * mesh.h, H_layers=m, delta_layers=L, warnings=warnings,
    )


def prolongation_matrix(fine, coarse):
    """Nodal P1 interpolation from `coarse` to `fine` (sparse, nv_f x nv_c)."""
    if fine.dim != coarse.dim or coarse.n > fine.n or fine.n % coarse.n:
        raise InvalidArgumentError("coarse mesh is not nested in the fine mesh")
    cmap = coarse_vertex_map(fine, coarse)
    if not np.allclose(fine.vertices[cmap], coarse.vertices, rtol=0, atol=1e-14):
        raise InvalidArgumentError("coarse vertices are not fine vertices")
    r = fine.n // coarse.n
    nc = coarse.n

    def split(k):
        c = np.minimum(k // r, nc - 1)
        return c, (k - c * r) / r

    if fine.dim == 1:
        k = np.arange(fine.n + 1)
        c, a = split(k)
        rows = np.concatenate([k, k])
        cols = np.concatenate([c, c + 1])
        vals = np.concatenate([1.0 - a, a])
    else:
        ii, jj = np.meshgrid(np.arange(fine.n + 1), np.arange(fine.n + 1))
        ii, jj = ii.ravel(), jj.ravel()
        ci, a = split(ii)
        cj, b = split(jj)
        c00 = cj * (nc + 1) + ci
        c10, c01, c11 = c00 + 1, c00 + nc + 1, c00 + nc + 2
        lower = a >= b
        # lower triangle (c00, c10, c11), upper triangle (c00, c11, c01)
        w00 = np.where(lower, 1.0 - a, 1.0 - b)
        w10 = np.where(lower, a - b, 0.0)
        w11 = np.where(lower, b, a)
        w01 = np.where(lower, 0.0, b - a)
        f = np.arange(ii.size)
        rows = np.concatenate([f, f, f, f])
        cols = np.concatenate([c00, c10, c11, c01])
        vals = np.concatenate([w00, w10, w11, w01])
    keep = vals != 0.0
    P = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fine.n_vertices, coarse.n_vertices))
    return P


def add_coarse_space(family, coarse):
    """Attach V_0 = I_0 S_H as subspace 0."""
    P = prolongation_matrix(family.mesh, coarse)
    mesh = family.mesh
    if mesh.parent is None or not same_space(mesh.parent, coarse):
        mesh.parent = coarse
    sub = Subspace(
        index=0, kind="coarse", basis=P.tocsc(),
        patch=np.arange(mesh.n_elements, dtype=np.int64),
    )
    return replace(family, coarse=CoarseSpace(mesh=coarse, prolongation=P), coarse_subspace=sub)


def color_subdomains(family):
    """
    Greedy coloring of the local subspaces.

    Two subspaces conflict when their element patches share an element.
    This is stricter than sharing a vertex, and it makes the energy exactly
    additive over the subspaces of one color.
    """
    subs = family.subspaces
    ne = family.mesh.n_elements
    N = len(subs)
    member = sp.csr_matrix(
        (np.ones(sum(s.patch.size for s in subs)),
         (np.concatenate([np.full(s.patch.size, k) for k, s in enumerate(subs)]),
          np.concatenate([s.patch for s in subs]))),
        shape=(N, ne),
    )
    conflict = (member @ member.T).tocsr()
    colors = np.full(N, -1, dtype=np.int64)
    for k in range(N):
        nbrs = conflict.indices[conflict.indptr[k]:conflict.indptr[k + 1]]
        used = {int(colors[j]) for j in nbrs if j != k and colors[j] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[k] = c
    n_colors = int(colors.max()) + 1 if N else 0
    tau = 1.0 / (n_colors + (1 if family.coarse is not None else 0))
    return Coloring(colors=colors, n_colors=n_colors, tau_lower=tau)


def kernel_decomposition_check(family, prob, tol=1e-10):
    """
    True iff every kernel function is a sum of kernel functions that each
    lie in a single subspace.
    """
    Phi = prob.kernel_matrix
    if Phi.shape[1] == 0:
        return True
    pieces = []
    for sub in family.all_subspaces:
        B = sub.basis.toarray()
        Z = sla.null_space(np.hstack([B, -Phi]))
        if Z.size:
            pieces.append(B @ Z[: B.shape[1]])
    if not pieces:
        return False
    S = np.hstack(pieces)
    coef, *_ = np.linalg.lstsq(S, Phi, rcond=None)
    res = np.linalg.norm(S @ coef - Phi, axis=0) / np.linalg.norm(Phi, axis=0)
    return bool(np.all(res <= tol))


def partition_of_unity(family):
    """
    Nodal values of the partition of unity, shape (N, nv).

    Each factor is 1 away from the box boundary and decays linearly to 0
    across a band of 2 * overlap_layers cells; sides on the domain boundary
    do not decay. Rows are normalized to sum to 1 at every vertex.
    """
    mesh = family.mesh
    n = mesh.n
    band = 2.0 * family.overlap_layers
    k = np.arange(n + 1)
    theta = np.empty((family.n_local, mesh.n_vertices))
    for row, sub in enumerate(family.subspaces):
        factors = []
        for lo, hi in sub.box:
            left = (k - lo).astype(float) if lo > 0 else np.full(k.shape, np.inf)
            right = (hi - k).astype(float) if hi < n else np.full(k.shape, np.inf)
            factors.append(np.clip(np.minimum(left, right) / band, 0.0, 1.0))
        if mesh.dim == 1:
            theta[row] = factors[0]
        else:
            theta[row] = np.outer(factors[1], factors[0]).ravel()
    total = theta.sum(axis=0)
    if np.any(total <= 0):
        raise FailedPreconditionError("partition of unity vanishes at some vertex")
    return theta / total


def construct_stable_decomposition(family, w):
    """
    Split w into components from each subspace, coarse first.

    The coarse part interpolates local averages of w (weighted by the
    coarse hat functions); the local parts are the partition of unity
    applied to the remainder.
    """
    if not isinstance(w, FeFunction) or not same_space(w.mesh, family.mesh):
        raise InvalidArgumentError("w must be an FeFunction on the family's mesh")
    family.check_covering()
    mesh = family.mesh
    x = w.coeffs
    out = []
    w0 = np.zeros_like(x)
    if family.coarse is not None:
        P = family.coarse.prolongation
        num = P.T @ (mesh.mass_matrix @ x)
        den = P.T @ mesh.mass_lumped
        w0 = P @ (num / den)
        out.append(FeFunction(mesh, w0))
    theta = partition_of_unity(family)
    rest = x - w0
    for row in range(family.n_local):
        out.append(FeFunction(mesh, theta[row] * rest))
    return out
