"""Fast invariant checks run by ``sphemu selfcheck``."""
from __future__ import annotations

import numpy as np

from sphemu import autodiff as ad
from sphemu import kernels
from sphemu.dyffusion import cold_sample
from sphemu.sfno import SFNO, SfnoConfig
from sphemu.sphere import get_sht


def check_sht_roundtrip():
    sht = get_sht(16, 32, 15)
    rng = np.random.default_rng(0)
    f = sht.synthesis(sht.analysis(rng.standard_normal((16, 32))))
    err = float(np.max(np.abs(sht.synthesis(sht.analysis(f)) - f)))
    return err < 1e-10, f"max round-trip error {err:.2e}"


def check_gradient():
    cfg = SfnoConfig(in_channels=2, out_channels=1, nlat=8, nlon=16, embed_dim=4, num_layers=1, max_time=2)
    net = SFNO(cfg, seed=1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 8, 8 * 2))
    y = rng.standard_normal((1, 1, 8, 16))
    name = "proj.w"
    with ad.Tape() as tape:
        loss = ad.mse_loss(net([x], 1), y)
    tape.backward(loss)
    grad = net.params[name].grad.ravel()[0]
    p = net.params[name].data
    eps = 1e-6
    p.flat[0] += eps
    up = float(ad.mse_loss(net([x], 1), y).data)
    p.flat[0] -= 2 * eps
    down = float(ad.mse_loss(net([x], 1), y).data)
    p.flat[0] += eps
    fd = (up - down) / (2 * eps)
    rel = abs(fd - grad) / max(abs(fd), 1e-12)
    return rel < 1e-4, f"relative error {rel:.2e}"


def check_nfe():
    counts = []
    for h in (2, 3, 4, 6):
        res = cold_sample(np.zeros(3), np.zeros((h, 1)), lambda x, f, j: x + 1.0,
                          lambda x0, xh, f0, i, rng: x0 + i * (xh - x0), h)
        counts.append(res.nfe.total == 3 * (h - 1))
    return all(counts), "3(h-1) per window for h in 2, 3, 4, 6"


def check_telescoping():
    h = 6
    x0 = np.random.default_rng(2).standard_normal(5)
    xh = x0 + 1.5
    interp = lambda a, b, f, i, rng: a + (i / h) * (b - a)  # noqa: E731
    res = cold_sample(x0, np.zeros((h, 1)), lambda x, f, j: xh, interp, h)
    exact = all(np.array_equal(res.states[j - 1], interp(x0, xh, None, j, None)) for j in range(1, h))
    return exact, "constant forecaster reproduces the interpolator path bit for bit"


def check_crps():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, 50))
    y = rng.standard_normal(50)
    e = x.shape[0]
    oracle = np.abs(x - y).mean(0) - np.abs(x[:, None] - x[None]).sum((0, 1)) / (2 * e * (e - 1))
    got = kernels.crps_fair(x, y)
    err = float(np.max(np.abs(got - oracle)))
    return err < 1e-10, f"fair CRPS vs double-sum oracle {err:.1e} ({kernels.BACKEND} backend)"


def check_backends():
    if kernels.compiled_backend is None:
        return True, "compiled backend unavailable, python fallback active"
    py, cy = kernels.python_backend, kernels.compiled_backend
    x, w = py.gauss_legendre(24)
    x2, w2 = cy.gauss_legendre(24)
    rng = np.random.default_rng(4)
    m, t = rng.standard_normal((5, 40)), rng.standard_normal(40)
    err = max(np.max(np.abs(x - x2)), np.max(np.abs(w - w2)),
              np.max(np.abs(py.crps_fair(m, t) - cy.crps_fair(m, t))))
    return err < 1e-12, f"compiled vs python max difference {err:.1e}"


CHECKS = {
    "sht-roundtrip": check_sht_roundtrip,
    "sfno-gradient": check_gradient,
    "nfe-identity": check_nfe,
    "cold-sampling-telescoping": check_telescoping,
    "crps-oracle": check_crps,
    "backend-equivalence": check_backends,
}


def run_all():
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
