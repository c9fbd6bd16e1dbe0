# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch kernels; same contracts as ``ssc._kernels._numpy``."""

from libc.math cimport pow

import numpy as np
cimport numpy as cnp

cnp.import_array()


def patch_energy(const double[::1] x, const long long[:, ::1] elements,
                 const double[:, :, ::1] grad_basis, const double[::1] areas,
                 double s, const long long[::1] subset):
    cdef Py_ssize_t m = subset.shape[0], k = elements.shape[1], d = grad_basis.shape[2]
    cdef Py_ssize_t i, a, c, t
    cdef double total = 0.0, gc, n2
    cdef double hs = 0.5 * s
    for i in range(m):
        t = subset[i]
        n2 = 0.0
        for c in range(d):
            gc = 0.0
            for a in range(k):
                gc += x[elements[t, a]] * grad_basis[t, a, c]
            n2 += gc * gc
        if n2 > 0.0:
            total += pow(n2, hs) * areas[t]
    return total / s


def patch_flux(const double[::1] x, const long long[:, ::1] elements,
               const double[:, :, ::1] grad_basis, const double[::1] areas,
               double s, const long long[::1] subset, const long long[::1] gl_map,
               double[::1] out):
    cdef Py_ssize_t m = subset.shape[0], k = elements.shape[1], d = grad_basis.shape[2]
    cdef Py_ssize_t i, a, c, t
    cdef long long li
    cdef double n2, coef, dot
    cdef double g[3]
    cdef double he = 0.5 * (s - 2.0)
    for i in range(m):
        t = subset[i]
        n2 = 0.0
        for c in range(d):
            g[c] = 0.0
            for a in range(k):
                g[c] += x[elements[t, a]] * grad_basis[t, a, c]
            n2 += g[c] * g[c]
        if n2 == 0.0:
            continue
        coef = areas[t] * pow(n2, he)
        for a in range(k):
            li = gl_map[elements[t, a]]
            if li < 0:
                continue
            dot = 0.0
            for c in range(d):
                dot += g[c] * grad_basis[t, a, c]
            out[li] += coef * dot
    return np.asarray(out)


def patch_hessian(const double[::1] x, const long long[:, ::1] elements,
                  const double[:, :, ::1] grad_basis, const double[::1] areas,
                  double s, double gamma, const long long[::1] subset,
                  const long long[::1] gl_map, double[:, ::1] out):
    cdef Py_ssize_t m = subset.shape[0], k = elements.shape[1], d = grad_basis.shape[2]
    cdef Py_ssize_t i, a, b, c, t
    cdef long long la, lb
    cdef double r, ca, cb, gga, ggb, dot, area
    cdef double g[3]
    cdef double gG[3]
    cdef bint quad = s == 2.0
    for i in range(m):
        t = subset[i]
        r = gamma * gamma
        for c in range(d):
            g[c] = 0.0
            for a in range(k):
                g[c] += x[elements[t, a]] * grad_basis[t, a, c]
            r += g[c] * g[c]
        if quad:
            ca = 1.0
            cb = 0.0
        else:
            ca = pow(r, 0.5 * (s - 2.0))
            cb = (s - 2.0) * pow(r, 0.5 * (s - 4.0)) if r > 0.0 else 0.0
        area = areas[t]
        for a in range(k):
            gga = 0.0
            for c in range(d):
                gga += g[c] * grad_basis[t, a, c]
            gG[a] = gga
        for a in range(k):
            la = gl_map[elements[t, a]]
            if la < 0:
                continue
            for b in range(k):
                lb = gl_map[elements[t, b]]
                if lb < 0:
                    continue
                dot = 0.0
                for c in range(d):
                    dot += grad_basis[t, a, c] * grad_basis[t, b, c]
                out[la, lb] += area * (ca * dot + cb * gG[a] * gG[b])
    return np.asarray(out)
