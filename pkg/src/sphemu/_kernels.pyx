# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Gauss-Legendre nodes, normalized associated Legendre
tables and the pairwise (fair) CRPS sum.

Every function here has a numpy twin in :mod:`sphemu.kernels` and must
return the same values to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, M_PI

cnp.import_array()


def gauss_legendre(int n, double tol=1e-14, int maxiter=100):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] nodes = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] weights = np.empty(n)
    cdef int i, k, it
    cdef double x, p0, p1, p2, dp, dx
    for i in range(n):
        # Tricomi initial guess, root i counted from x = +1
        x = cos(M_PI * (i + 0.75) / (n + 0.5))
        for it in range(maxiter):
            p0 = 1.0
            p1 = x
            for k in range(2, n + 1):
                p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
                p0 = p1
                p1 = p2
            dp = n * (x * p1 - p0) / (x * x - 1.0)
            dx = p1 / dp
            x -= dx
            if fabs(dx) < tol:
                break
        p0 = 1.0
        p1 = x
        for k in range(2, n + 1):
            p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
            p0 = p1
            p1 = p2
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        nodes[i] = x
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp)
    return nodes, weights


def legendre_table(double[:] costheta, int lmax):
    cdef Py_ssize_t nx = costheta.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((nx, lmax + 1, lmax + 1))
    cdef double[:, :, :] p = out
    cdef Py_ssize_t i
    cdef int l, m
    cdef double x, s, pmm, a, b
    for i in range(nx):
        x = costheta[i]
        s = sqrt(1.0 - x * x)
        pmm = sqrt(1.0 / (4.0 * M_PI))
        for m in range(lmax + 1):
            if m > 0:
                pmm = -sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
            p[i, m, m] = pmm
            if m + 1 <= lmax:
                p[i, m + 1, m] = sqrt(2.0 * m + 3.0) * x * pmm
            for l in range(m + 2, lmax + 1):
                a = sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
                b = sqrt(((l - 1.0) * (l - 1.0) - m * m) / (4.0 * (l - 1.0) * (l - 1.0) - 1.0))
                p[i, l, m] = a * (x * p[i, l - 1, m] - b * p[i, l - 2, m])
    return out


def legendre_dtheta(double[:] costheta, double[:, :, :] p):
    cdef Py_ssize_t nx = p.shape[0]
    cdef int lmax = p.shape[1] - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((nx, lmax + 1, lmax + 1))
    cdef double[:, :, :] d = out
    cdef Py_ssize_t i
    cdef int l, m
    cdef double x, s, c
    for i in range(nx):
        x = costheta[i]
        s = sqrt(1.0 - x * x)
        for m in range(lmax + 1):
            for l in range(m, lmax + 1):
                c = l * x * p[i, l, m]
                if l > m:
                    c -= sqrt((2.0 * l + 1.0) / (2.0 * l - 1.0) * (l * l - m * m)) * p[i, l - 1, m]
                d[i, l, m] = c / s
    return out


def crps_fair(double[:, :] members, double[:] truth):
    cdef Py_ssize_t E = members.shape[0]
    cdef Py_ssize_t N = members.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(N)
    cdef double[:] o = out
    cdef Py_ssize_t n, e, f
    cdef double skill, spread, xe
    for n in range(N):
        skill = 0.0
        for e in range(E):
            skill += fabs(members[e, n] - truth[n])
        skill /= E
        spread = 0.0
        if E > 1:
            for e in range(E):
                xe = members[e, n]
                for f in range(E):
                    spread += fabs(xe - members[f, n])
            spread /= 2.0 * E * (E - 1)
        o[n] = skill - spread
    return out
