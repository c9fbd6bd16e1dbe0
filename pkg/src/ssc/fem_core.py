"""
P1 finite elements on the unit interval and the unit square.

Meshes are uniform and structured so that coarse/fine pairs are exactly
nested. Every integral needed downstream is computed exactly: gradients of
P1 functions are elementwise constant and the mass matrix is assembled in
closed form.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse as sp

from .errors import InvalidArgumentError


@dataclass(eq=False)
class Mesh:
    """
    Conforming simplicial mesh of [0, 1] or [0, 1]^2.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    vertices : ndarray, shape (nv, dim)
        Vertex coordinates.
    elements : ndarray, shape (ne, dim + 1)
        Vertex indices of each segment or triangle.
    n : int
        Number of cells per axis of the underlying uniform grid.
    parent : Mesh, optional
        Coarser mesh that this mesh refines.
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    n: int
    parent: "Mesh | None" = field(default=None, repr=False)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def h(self):
        """Maximum element diameter."""
        return 1.0 / self.n if self.dim == 1 else np.sqrt(2.0) / self.n

    @property
    def spacing(self):
        """Grid spacing along each axis."""
        return 1.0 / self.n

    @cached_property
    def grad_basis(self):
        """Gradients of the barycentric basis, shape (ne, dim + 1, dim)."""
        X = self.vertices[self.elements]
        B = X[:, 1:, :] - X[:, :1, :]
        Binv_T = np.linalg.inv(B).transpose(0, 2, 1)
        G = np.empty((self.n_elements, self.dim + 1, self.dim))
        G[:, 1:, :] = Binv_T
        G[:, 0, :] = -Binv_T.sum(axis=1)
        return np.ascontiguousarray(G)

    @cached_property
    def areas(self):
        """Element measures (length in 1D, area in 2D)."""
        X = self.vertices[self.elements]
        B = X[:, 1:, :] - X[:, :1, :]
        fact = 1.0 if self.dim == 1 else 2.0
        return np.abs(np.linalg.det(B)) / fact

    @cached_property
    def mass_matrix(self):
        """Exact P1 mass matrix (CSR)."""
        d = self.dim
        local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
        vals = self.areas[:, None, None] * local[None, :, :]
        return self._assemble(vals)

    @cached_property
    def stiffness_matrix(self):
        """P1 Neumann Laplacian (CSR); its kernel is the constants."""
        G = self.grad_basis
        vals = self.areas[:, None, None] * np.einsum("tak,tbk->tab", G, G)
        return self._assemble(vals)

    @cached_property
    def mass_lumped(self):
        """Load vector of the constant function 1 (mass-matrix row sums)."""
        return np.asarray(self.mass_matrix.sum(axis=1)).ravel()

    @cached_property
    def element_adjacency(self):
        """Vertex-to-element incidence matrix (CSR, nv x ne)."""
        ne, k = self.elements.shape
        rows = self.elements.ravel()
        cols = np.repeat(np.arange(ne), k)
        data = np.ones(rows.size)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, ne))

    def _assemble(self, vals):
        k = self.dim + 1
        rows = np.repeat(self.elements, k, axis=1).ravel()
        cols = np.tile(self.elements, (1, k)).ravel()
        nv = self.n_vertices
        return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(nv, nv))

    def grid_index(self, i, j=0):
        """Vertex index of grid point (i, j)."""
        return i if self.dim == 1 else j * (self.n + 1) + i

    def to_json(self):
        return json.dumps(
            {
                "dim": self.dim,
                "n": self.n,
                "vertices": self.vertices.tolist(),
                "elements": self.elements.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(
            dim=int(data["dim"]),
            vertices=np.asarray(data["vertices"], dtype=float).reshape(-1, data["dim"]),
            elements=np.asarray(data["elements"], dtype=np.int64),
            n=int(data["n"]),
        )


def same_space(a, b):
    """True if two meshes describe the same P1 space."""
    if a is b:
        return True
    return (
        a.dim == b.dim
        and a.n_vertices == b.n_vertices
        and a.n_elements == b.n_elements
        and np.array_equal(a.vertices, b.vertices)
        and np.array_equal(a.elements, b.elements)
    )


@dataclass(eq=False)
class FeFunction:
    """Coefficient vector of a P1 function, indexed by mesh vertices."""

    mesh: Mesh
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.mesh.n_vertices,):
            raise InvalidArgumentError(
                f"expected {self.mesh.n_vertices} coefficients, got shape {self.coeffs.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise InvalidArgumentError("FeFunction coefficients must be finite")

    def _other(self, other):
        if isinstance(other, FeFunction):
            if not same_space(self.mesh, other.mesh):
                raise InvalidArgumentError("functions live on different meshes")
            return other.coeffs
        return other

    def __add__(self, other):
        return FeFunction(self.mesh, self.coeffs + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return FeFunction(self.mesh, self.coeffs - self._other(other))

    def __rsub__(self, other):
        return FeFunction(self.mesh, self._other(other) - self.coeffs)

    def __mul__(self, c):
        return FeFunction(self.mesh, float(c) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return FeFunction(self.mesh, -self.coeffs)

    def copy(self):
        return FeFunction(self.mesh, self.coeffs.copy())


@dataclass(eq=False)
class DualVector:
    """Assembled functional; pairs with an FeFunction by the dot product."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise InvalidArgumentError(
                f"expected {self.mesh.n_vertices} values, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("DualVector entries must be finite")

    def pair(self, v):
        if not same_space(self.mesh, v.mesh):
            raise InvalidArgumentError("dual vector and function live on different meshes")
        return float(self.values @ v.coeffs)


def constant(mesh, c=1.0):
    return FeFunction(mesh, np.full(mesh.n_vertices, float(c)))


def interpolate(mesh, func):
    """Nodal interpolant of a callable taking an (nv, dim) coordinate array."""
    return FeFunction(mesh, np.asarray(func(mesh.vertices), dtype=float).reshape(-1))


def build_interval_mesh(n_elems):
    """Uniform partition of [0, 1] into `n_elems` segments."""
    n = _check_resolution(n_elems)
    verts = np.linspace(0.0, 1.0, n + 1).reshape(-1, 1)
    elems = np.column_stack([np.arange(n), np.arange(1, n + 1)]).astype(np.int64)
    return Mesh(dim=1, vertices=verts, elements=elems, n=n)


def build_square_mesh(n):
    """
    Uniform grid of [0, 1]^2 with every cell split along its
    bottom-left to top-right diagonal.
    """
    n = _check_resolution(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elems = np.empty((2 * n * n, 3), dtype=np.int64)
    elems[0::2] = lower
    elems[1::2] = upper
    return Mesh(dim=2, vertices=verts, elements=elems, n=n)


def _check_resolution(n):
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"resolution must be a positive integer, got {n!r}")
    return int(n)


def coarsen(mesh, factor):
    """
    Return the uniform mesh with resolution ``mesh.n // factor``.

    The fine mesh's ``parent`` is set to the returned coarse mesh.
    """
    factor = _check_resolution(factor)
    if mesh.n % factor:
        raise InvalidArgumentError(
            f"resolution {mesh.n} is not divisible by coarsening factor {factor}"
        )
    build = build_interval_mesh if mesh.dim == 1 else build_square_mesh
    coarse = build(mesh.n // factor)
    mesh.parent = coarse
    return coarse


def coarse_vertex_map(fine, coarse):
    """Fine-mesh index of every coarse vertex (coarse vertices are a subset)."""
    if fine.dim != coarse.dim or fine.n % coarse.n:
        raise InvalidArgumentError("meshes are not a nested uniform pair")
    r = fine.n // coarse.n
    if fine.dim == 1:
        return np.arange(coarse.n + 1) * r
    ci, cj = np.meshgrid(np.arange(coarse.n + 1), np.arange(coarse.n + 1))
    return (cj.ravel() * r) * (fine.n + 1) + ci.ravel() * r


def element_gradients(v):
    """Elementwise constant gradient of an FeFunction, shape (ne, dim)."""
    m = v.mesh
    return np.einsum("ta,tak->tk", v.coeffs[m.elements], m.grad_basis)


def seminorm_w1s(v, s):
    """W^{1,s} seminorm, exact for P1 functions."""
    if not s > 1:
        raise InvalidArgumentError(f"seminorm exponent must exceed 1, got {s}")
    g = np.sqrt(np.sum(element_gradients(v) ** 2, axis=1))
    return float(np.sum(g**s * v.mesh.areas)) ** (1.0 / s)


def norm_l2(v):
    x = v.coeffs
    return float(np.sqrt(max(x @ (v.mesh.mass_matrix @ x), 0.0)))


def norm_eps_q(v, s_semi, eps, q):
    """(|v|^q + eps ||v||^q)^(1/q) with the W^{1,s_semi} seminorm and L2 norm."""
    if not eps > 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    if not q > 1:
        raise InvalidArgumentError(f"q must exceed 1, got {q}")
    return (seminorm_w1s(v, s_semi) ** q + eps * norm_l2(v) ** q) ** (1.0 / q)


def load_of(v):
    """Assembled load M v of the function v."""
    return DualVector(v.mesh, v.mesh.mass_matrix @ v.coeffs)


def make_compatible(raw):
    """Project a load onto {f : <f, 1> = 0} along the load of the constant 1."""
    m = raw.mesh.mass_lumped
    vals = raw.values
    shift = vals.sum() / m.sum()
    if shift == 0.0:
        return DualVector(raw.mesh, vals.copy())
    out = vals - shift * m
    # second pass removes the rounding left by the first
    out = out - (out.sum() / m.sum()) * m
    return DualVector(raw.mesh, out)
