import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def bandlimited(sht, lmax_keep, rng, channels=None):
    """Random real field with power only at degrees <= lmax_keep."""
    shape = (() if channels is None else (channels,)) + (sht.lmax + 1, sht.lmax + 1)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c[..., lmax_keep + 1 :, :] = 0
    c = np.where(sht.mask(), c, 0)
    c[..., :, 0] = c[..., :, 0].real
    return sht.synthesis(c)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(prog, forcing=None, nlat=8, land_fraction=0.25, seed=0):
    """In-memory EpisodeDataset from ``{name: (T, I, J)}`` prognostic arrays."""
    from sphemu.toy_climate import EpisodeDataset

    nlon = 2 * nlat
    n_t = next(iter(prog.values())).shape[0]
    rng = np.random.default_rng(seed)
    if forcing is None:
        phase = np.arange(n_t)[:, None, None] * np.ones((1, nlat, nlon))
        forcing = {"DSWRF": 300 + 50 * np.sin(2 * np.pi * phase / 8), "SST": 290 + np.cos(2 * np.pi * phase / 8)}
    f_l = (rng.random((nlat, nlon)) < land_fraction).astype(float)
    inv = {"z_s": rng.random((nlat, nlon)) * 1000 * f_l, "f_l": f_l}
    variables = {}
    entries = []
    for role, group in (("prognostic", prog), ("forcing", forcing), ("invariant", inv)):
        for name, arr in group.items():
            variables[name] = np.asarray(arr, dtype=np.float32)
            entries.append({"name": name, "role": role, "units": "1", "shape": list(np.shape(arr)),
                            "dtype": "<f4", "file": f"{name}.f32"})
    manifest = {"schema_version": 1, "grid": {"kind": "gauss-legendre", "nlat": nlat, "nlon": nlon},
                "n_times": n_t, "period": 8, "variables": entries}
    return EpisodeDataset(manifest, variables)


def linear_member(seed, n_t=40, nlat=8, channels=("a", "b", "T_s")):
    """Trajectories linear in time, so every window is an exact linear interpolation."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_t)[:, None, None] / n_t
    prog = {}
    for k, name in enumerate(channels):
        base = rng.standard_normal((nlat, 2 * nlat))
        slope = rng.standard_normal((nlat, 2 * nlat))
        prog[name] = 10.0 * k + base + 4.0 * slope * (t - 0.5)
    return make_dataset(prog, nlat=nlat, seed=seed)


# -- acceptance summary -------------------------------------------------------------
class AcceptanceRecorder:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self):
        self.lines = []

    def record(self, number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        self.lines.append((number, line))
        print(line)


def pytest_configure(config):
    config._acceptance = AcceptanceRecorder()


@pytest.fixture(scope="session")
def acceptance(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance", None)
    if lines and lines.lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
