"""Hot numerical kernels with a compiled fast path.

The Cython extension ``sphemu._kernels`` is used when it was built and
``SPHEMU_PURE_PYTHON`` is unset; otherwise the numpy implementations below
are selected at import.  Both backends compute the same quantities in the
same summation order and agree to rounding.

Kernels
-------
gauss_legendre
    Gauss-Legendre nodes (descending in x) and weights by Newton iteration.
legendre_table
    Orthonormal associated Legendre functions with Condon-Shortley phase,
    ``P[i, l, m]`` for ``0 <= m <= l <= lmax``.
legendre_dtheta
    Colatitude derivative of ``legendre_table``.
crps_fair
    Per-cell fair CRPS from the literal pairwise double sum.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


def _py_gauss_legendre(n: int, tol: float = 1e-14, maxiter: int = 100):
    i = np.arange(n)
    x = np.cos(np.pi * (i + 0.75) / (n + 0.5))

    def poly(x):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for k in range(2, n + 1):
            p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        return p0, p1

    active = np.ones(n, dtype=bool)
    for _ in range(maxiter):
        p0, p1 = poly(x)
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        dx = np.where(active, p1 / dp, 0.0)
        x = x - dx
        active &= np.abs(dx) >= tol
        if not active.any():
            break
    p0, p1 = poly(x)
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return x, 2.0 / ((1.0 - x * x) * dp * dp)


def _py_legendre_table(costheta, lmax: int):
    x = np.asarray(costheta, dtype=np.float64)
    s = np.sqrt(1.0 - x * x)
    p = np.zeros((x.size, lmax + 1, lmax + 1))
    pmm = np.full(x.size, np.sqrt(1.0 / (4.0 * np.pi)))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        p[:, m, m] = pmm
        if m + 1 <= lmax:
            p[:, m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p[:, l, m] = a * (x * p[:, l - 1, m] - b * p[:, l - 2, m])
    return p


def _py_legendre_dtheta(costheta, p):
    x = np.asarray(costheta, dtype=np.float64)
    s = np.sqrt(1.0 - x * x)
    lmax = p.shape[1] - 1
    d = np.zeros_like(p)
    for m in range(lmax + 1):
        for l in range(m, lmax + 1):
            c = l * x * p[:, l, m]
            if l > m:
                c = c - np.sqrt((2.0 * l + 1.0) / (2.0 * l - 1.0) * (l * l - m * m)) * p[:, l - 1, m]
            d[:, l, m] = c / s
    return d


def _py_crps_fair(members, truth):
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n_ens = members.shape[0]
    skill = np.zeros(truth.shape)
    for e in range(n_ens):
        skill += np.abs(members[e] - truth)
    skill /= n_ens
    spread = np.zeros(truth.shape)
    if n_ens > 1:
        for e in range(n_ens):
            for f in range(n_ens):
                spread += np.abs(members[e] - members[f])
        spread /= 2.0 * n_ens * (n_ens - 1)
    return skill - spread


python_backend = SimpleNamespace(
    name="python",
    gauss_legendre=_py_gauss_legendre,
    legendre_table=_py_legendre_table,
    legendre_dtheta=_py_legendre_dtheta,
    crps_fair=_py_crps_fair,
)


def _load_compiled():
    if os.environ.get("SPHEMU_PURE_PYTHON"):
        return None
    try:
        from sphemu import _kernels
    except ImportError:
        return None
    return SimpleNamespace(
        name="cython",
        gauss_legendre=_kernels.gauss_legendre,
        legendre_table=lambda x, lmax: _kernels.legendre_table(
            np.ascontiguousarray(x, dtype=np.float64), int(lmax)
        ),
        legendre_dtheta=lambda x, p: _kernels.legendre_dtheta(
            np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(p, dtype=np.float64)
        ),
        crps_fair=_flat_cells(_kernels.crps_fair),
    )


def _flat_cells(kernel):
    def crps_fair(members, truth):
        truth = np.asarray(truth, dtype=np.float64)
        members = np.asarray(members, dtype=np.float64)
        flat = kernel(
            np.ascontiguousarray(members.reshape(members.shape[0], -1)),
            np.ascontiguousarray(truth.reshape(-1)),
        )
        return flat.reshape(truth.shape)

    return crps_fair


compiled_backend = _load_compiled()
backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = backend.name

gauss_legendre = backend.gauss_legendre
legendre_table = backend.legendre_table
legendre_dtheta = backend.legendre_dtheta
crps_fair = backend.crps_fair
