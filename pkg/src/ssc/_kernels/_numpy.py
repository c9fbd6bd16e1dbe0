"""Vectorized numpy implementation of the patch kernels.

Every function works on a subset of elements and writes into local
numbering given by ``gl_map`` (global vertex -> local index, -1 if the
vertex is not a local unknown).
"""

import numpy as np


def _element_grads(x, elements, grad_basis, subset):
    el = elements[subset]
    G = grad_basis[subset]
    g = np.einsum("ta,tak->tk", x[el], G)
    return el, G, g


def patch_energy(x, elements, grad_basis, areas, s, subset):
    """Sum over `subset` of |grad x|^s |T| / s."""
    _, _, g = _element_grads(x, elements, grad_basis, subset)
    n2 = np.einsum("tk,tk->t", g, g)
    return float(np.sum(n2 ** (0.5 * s) * areas[subset]) / s)


def patch_flux(x, elements, grad_basis, areas, s, subset, gl_map, out):
    """Accumulate the s-Laplace flux into `out` (local numbering)."""
    el, G, g = _element_grads(x, elements, grad_basis, subset)
    n2 = np.einsum("tk,tk->t", g, g)
    coef = np.zeros_like(n2)
    nz = n2 > 0.0
    coef[nz] = n2[nz] ** (0.5 * (s - 2.0))
    contrib = (areas[subset] * coef)[:, None] * np.einsum("tk,tak->ta", g, G)
    loc = gl_map[el]
    mask = loc >= 0
    np.add.at(out, loc[mask], contrib[mask])
    return out


def patch_hessian(x, elements, grad_basis, areas, s, gamma, subset, gl_map, out):
    """Accumulate the gamma-regularized s-Laplace Hessian into dense `out`."""
    el, G, g = _element_grads(x, elements, grad_basis, subset)
    r = np.einsum("tk,tk->t", g, g) + gamma * gamma
    area = areas[subset]
    if s == 2.0:
        a = np.ones_like(r)
        b = np.zeros_like(r)
    else:
        with np.errstate(divide="ignore"):
            a = r ** (0.5 * (s - 2.0))
            b = (s - 2.0) * r ** (0.5 * (s - 4.0))
        b[r == 0.0] = 0.0
    GG = np.einsum("tak,tbk->tab", G, G)
    gG = np.einsum("tk,tak->ta", g, G)
    blk = area[:, None, None] * (a[:, None, None] * GG + b[:, None, None] * gG[:, :, None] * gG[:, None, :])
    loc = gl_map[el]
    k = el.shape[1]
    li = np.repeat(loc, k, axis=1).reshape(-1, k, k)
    lj = np.tile(loc, (1, k)).reshape(-1, k, k)
    mask = (li >= 0) & (lj >= 0)
    np.add.at(out, (li[mask], lj[mask]), blk[mask])
    return out
