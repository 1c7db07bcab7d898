"""Synthetic reference climate on a Gaussian grid.

Each of ``K`` layers carries vorticity, temperature and total water.  The
layer flow advects the scalars (the quadratic cross-channel coupling),
scalars relax toward seasonally varying targets, and a stochastic eddy
forcing keeps the flow turbulent.  A slowly decaying large-scale mode
``S`` (degrees 1-3) is drawn per member from its seed and imprints on every
channel's equilibrium, so initial conditions carry information about the
decade that follows.

The surface temperature equals the prescribed sea-surface temperature over
ocean and relaxes toward an insolation-driven equilibrium over land.
Surface pressure is diagnosed from topography, ``S`` and the lower-layer
streamfunction.

Units: one stored step is one time unit, ``period`` steps make a year.
Internal velocities are in radians per step and converted to m/s on output.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sphemu.errors import (
    ConfigurationError,
    CorruptDatasetError,
    InvalidArgumentError,
    UnsupportedVersionError,
)
from sphemu.sphere import SphericalGrid, area_weighted_mean, build_grid, get_sht

SCHEMA_VERSION = 1
GRAVITY = 9.80665
VELOCITY_SCALE = 295.0  # m/s per rad/step
FORCING_NAMES = ("DSWRF", "SST")
INVARIANT_NAMES = ("z_s", "f_l")
UNITS = {"T": "K", "q": "kg/kg", "u": "m/s", "v": "m/s", "T_s": "K", "p_s": "Pa",
         "DSWRF": "W/m2", "SST": "K", "z_s": "m", "f_l": "1", "TWP": "mm", "WS": "m/s"}


@dataclass
class ToyClimateConfig:
    nlat: int = 32
    nlon: int | None = None
    layers: int = 2
    sigma: tuple[float, ...] = (0.0, 0.45, 1.0)
    period: int = 64
    n_steps: int = 640
    spinup_steps: int = 128
    substeps: int = 4
    step_length: float = 0.25
    lmax: int | None = None
    g: float = GRAVITY
    coupling: float = 1.0
    forcing_strength: float = 1.0
    damping: float = 1.0
    rotation: float = 1.0
    jet_speed: tuple[float, ...] = (0.04, 0.1)
    eddy_forcing: float = 0.06
    slow_timescale: float = 10000.0
    slow_amplitude: float = 1.0
    slow_excitation: float = 0.002
    include_derived: bool = False

    def __post_init__(self):
        self.sigma = tuple(float(s) for s in self.sigma)
        self.jet_speed = tuple(float(s) for s in self.jet_speed)
        if self.nlon is None:
            self.nlon = 2 * self.nlat
        if self.lmax is None:
            # alias-free truncation for quadratic products
            self.lmax = (2 * self.nlat - 1) // 3
        if self.nlat < 4 or self.nlon % 2:
            raise InvalidArgumentError("need nlat >= 4 and an even nlon")
        if self.layers < 1 or len(self.sigma) != self.layers + 1:
            raise InvalidArgumentError("sigma needs layers + 1 boundaries")
        s = np.asarray(self.sigma)
        if s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
            raise InvalidArgumentError("sigma must increase strictly from 0 to 1")
        if len(self.jet_speed) != self.layers:
            raise InvalidArgumentError("jet_speed needs one entry per layer")
        if self.lmax < 6:
            # the stochastic eddy band starts at degree 6
            raise InvalidArgumentError("need lmax >= 6 (nlat >= 10) for the eddy forcing band")
        if self.step_length <= 0:
            raise InvalidArgumentError("step_length must be positive")
        if self.period < 1 or self.n_steps < 1 or self.spinup_steps < 0 or self.substeps < 1:
            raise InvalidArgumentError("period, n_steps, substeps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma"] = list(self.sigma)
        d["jet_speed"] = list(self.jet_speed)
        return d

    @property
    def prognostic_names(self) -> list[str]:
        names = []
        for k in range(self.layers):
            names += [f"T_{k}", f"q_{k}", f"u_{k}", f"v_{k}"]
        return names + ["T_s", "p_s"]


def _units(name: str) -> str:
    return UNITS.get(name, UNITS.get(name.rsplit("_", 1)[0], ""))


# -- static fields ----------------------------------------------------------
def _invariants(grid: SphericalGrid) -> tuple[np.ndarray, np.ndarray]:
    """Smooth continents and mountains; fixed across seeds."""
    lat = (0.5 * np.pi - grid.colatitudes)[:, None]
    lon = grid.longitudes[None, :]

    def blob(lat0, lon0, wlat, wlon):
        dlon = np.angle(np.exp(1j * (lon - lon0)))
        return np.exp(-((lat - lat0) / wlat) ** 2 - (dlon / wlon) ** 2)

    land = (
        blob(0.75, 1.6, 0.35, 0.9)
        + blob(0.2, 0.4, 0.45, 0.35)
        + blob(-0.35, 5.0, 0.5, 0.3)
        + blob(0.9, 4.2, 0.3, 0.8)
        + blob(-1.35, 2.0, 0.2, 3.0)
    )
    f_l = 1.0 / (1.0 + np.exp(-8.0 * (land - 0.45)))
    z_s = 2500.0 * blob(0.6, 1.9, 0.15, 0.25) + 1800.0 * blob(-0.4, 5.05, 0.35, 0.1)
    z_s = z_s * f_l + 150.0 * f_l
    return z_s, f_l


def _declination(phase: float) -> float:
    return math.radians(23.44) * math.sin(2.0 * math.pi * phase)


def _insolation(lat: np.ndarray, decl: float) -> np.ndarray:
    """Daily-mean top-of-atmosphere insolation."""
    s0 = 1361.0
    tt = np.clip(-np.tan(lat) * math.tan(decl), -1.0, 1.0)
    h0 = np.arccos(tt)
    q = (s0 / np.pi) * (h0 * np.sin(lat) * math.sin(decl) + np.cos(lat) * math.cos(decl) * np.sin(h0))
    return np.maximum(q, 0.0)


class _Forcing:
    """Precomputed forcing and relaxation targets for every phase of the year."""

    def __init__(self, cfg: ToyClimateConfig, grid: SphericalGrid, sht):
        self.cfg = cfg
        lat = (0.5 * np.pi - grid.colatitudes)[:, None] * np.ones((1, grid.nlon))
        lon = grid.longitudes[None, :] * np.ones((grid.nlat, 1))
        fs = cfg.forcing_strength
        nphase = cfg.period
        self.dswrf = np.empty((nphase, grid.nlat, grid.nlon))
        self.sst = np.empty_like(self.dswrf)
        self.t_rad = np.empty((nphase, cfg.layers, grid.nlat, grid.nlon))
        self.zeta_target = np.empty((nphase, cfg.layers, sht.nl, sht.nl), dtype=complex)
        warm_pool = 1.5 * np.cos(lon - np.pi) * np.exp(-(lat**2) / 0.1)
        for p in range(nphase):
            frac = p / cfg.period
            decl = fs * _declination(frac)
            lagged = fs * _declination(frac - 0.125)
            self.dswrf[p] = _insolation(lat, decl)
            self.sst[p] = np.maximum(271.35, 271.35 + 29.0 * np.cos(lat - 0.35 * lagged) ** 2 - 3.0 + warm_pool)
            for k in range(cfg.layers):
                base = 288.0 - 30.0 * k
                self.t_rad[p, k] = base + 40.0 * (1.0 / 3.0 - np.sin(lat - 0.5 * lagged) ** 2)
                amp = cfg.jet_speed[k] * (1.0 - 0.35 * np.sin(lat) * math.sin(2.0 * math.pi * frac) * fs)
                self.zeta_target[p, k] = _zonal_vorticity(sht, amp * np.sin(2.0 * lat) ** 2 * np.cos(lat))


def _zonal_vorticity(sht, u: np.ndarray) -> np.ndarray:
    """Spectral vorticity of a purely zonal flow ``u`` (rad/step)."""
    sin_t = np.sin(sht.grid.colatitudes)[:, None]
    dtheta, _ = sht.gradient(sht.analysis(u * sin_t))
    zeta = sht.analysis(dtheta / sin_t)
    zeta[..., 0, 0] = 0.0
    return zeta


def forcing_at(cfg: ToyClimateConfig, steps) -> dict[str, np.ndarray]:
    """Forcing fields at absolute step indices; exactly periodic in ``period``."""
    grid = build_grid(cfg.nlat, cfg.nlon)
    sht = get_sht(cfg.nlat, cfg.nlon, cfg.lmax)
    forcing = _Forcing(cfg, grid, sht)
    idx = np.mod(np.asarray(steps, dtype=np.int64), cfg.period)
    return {"DSWRF": forcing.dswrf[idx], "SST": forcing.sst[idx]}


# -- dataset ----------------------------------------------------------------
@dataclass
class EpisodeDataset:
    """One stored trajectory: per-variable float32 arrays plus a manifest."""

    manifest: dict
    variables: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self, role: str) -> list[str]:
        return [v["name"] for v in self.manifest["variables"] if v["role"] == role]

    @property
    def prognostic_names(self) -> list[str]:
        return self.names("prognostic")

    @property
    def forcing_names(self) -> list[str]:
        return self.names("forcing")

    @property
    def invariant_names(self) -> list[str]:
        return self.names("invariant")

    def stack(self, role: str) -> np.ndarray:
        """Variables of one role stacked on a channel axis, float32."""
        names = self.names(role)
        axis = 0 if role == "invariant" else 1
        return np.stack([self.variables[n] for n in names], axis=axis)

    @property
    def grid(self) -> SphericalGrid:
        g = self.manifest["grid"]
        return build_grid(g["nlat"], g["nlon"])

    @property
    def n_times(self) -> int:
        return int(self.manifest["n_times"])

    def ocean_mask(self) -> np.ndarray:
        return self.variables["f_l"] < 0.5

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeDataset):
            return NotImplemented
        if self.manifest != other.manifest or set(self.variables) != set(other.variables):
            return False
        return all(
            self.variables[k].dtype == other.variables[k].dtype
            and self.variables[k].shape == other.variables[k].shape
            and self.variables[k].tobytes() == other.variables[k].tobytes()
            for k in self.variables
        )


def derive_twp(q_layers, p_s, sigma, g: float = GRAVITY) -> np.ndarray:
    """Total water path ``(1/g) sum_k q_k dp_k`` in mm with ``dp_k = (sigma_{k+1} - sigma_k) p_s``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    q = [np.asarray(qk, dtype=np.float64) for qk in q_layers]
    if len(q) != len(sigma) - 1:
        raise InvalidArgumentError(f"{len(q)} layers of q but {len(sigma) - 1} sigma layers")
    p_s = np.asarray(p_s, dtype=np.float64)
    dsig = np.diff(sigma)
    total = np.zeros(np.broadcast_shapes(p_s.shape, *(qk.shape for qk in q)))
    for qk, ds in zip(q, dsig):
        total = total + qk * (ds * p_s)
    return total / g


def derive_ws(u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidArgumentError(f"u {u.shape} and v {v.shape} differ in shape")
    return np.hypot(u, v)


def _derived(cfg: ToyClimateConfig, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    q = [arrays[f"q_{k}"].astype(np.float64) for k in range(cfg.layers)]
    out = {"TWP": derive_twp(q, arrays["p_s"].astype(np.float64), cfg.sigma, cfg.g).astype(np.float32)}
    for k in range(cfg.layers):
        out[f"WS_{k}"] = derive_ws(arrays[f"u_{k}"], arrays[f"v_{k}"]).astype(np.float32)
    return out


def recompute_derived(ds: EpisodeDataset) -> dict[str, np.ndarray]:
    cfg = ToyClimateConfig(**ds.manifest["config"])
    return _derived(cfg, ds.variables)


# -- simulation ---------------------------------------------------------------
def _qsat(t: np.ndarray) -> np.ndarray:
    return 3.8e-3 * np.exp(0.067 * (t - 273.15))


def _q_target(rh, t, t_ref):
    """Saturation humidity linearized about the radiative temperature.

    Keeps the global-mean humidity insensitive to the amplitude of
    temperature anomalies, so slow-mode decay does not show up as drift.
    """
    return np.maximum(rh * _qsat(t_ref) * (1.0 + 0.067 * (t - t_ref)), 0.0)


def _advect(u, v, dth, dph):
    return u * dph - v * dth


class _Model:
    def __init__(self, cfg: ToyClimateConfig):
        self.cfg = cfg
        self.grid = build_grid(cfg.nlat, cfg.nlon)
        self.sht = get_sht(cfg.nlat, cfg.nlon, cfg.lmax)
        self.forcing = _Forcing(cfg, self.grid, self.sht)
        self.z_s, self.f_l = _invariants(self.grid)
        self.ocean = self.f_l < 0.5
        sht = self.sht
        nl = sht.nl
        l = np.arange(nl, dtype=np.float64)[:, None] * np.ones((1, nl))
        self.mask = sht.mask()
        self.lap = -l * (l + 1.0)
        inv = np.zeros_like(self.lap)
        inv[1:] = 1.0 / self.lap[1:]
        self.inv_lap = inv
        lmax = cfg.lmax
        self.kappa = cfg.damping * 0.5 * l * (l + 1.0) / (lmax * (lmax + 1.0))
        self.hyper = cfg.damping * (l * (l + 1.0) / (lmax * (lmax + 1.0))) ** 2
        self.slow_mask = (l >= 1) & (l <= 3) & self.mask
        self.eddy_mask = (l >= 6) & (l <= 12) & self.mask
        f_cor = 2.0 * cfg.rotation * np.cos(self.grid.colatitudes)[:, None] * np.ones((1, cfg.nlon))
        self.f_cor = sht.analysis(f_cor)
        self.f_cor_grid = f_cor
        self.sin_t = np.sin(self.grid.colatitudes)[:, None]
        self.lat = (0.5 * np.pi - self.grid.colatitudes)[:, None] * np.ones((1, cfg.nlon))
        self.p_base = 1.0e5 * np.exp(-self.z_s / 8000.0)

    # spectral noise with unit grid variance per mode band
    def _noise(self, rng, shape, band):
        nl = self.sht.nl
        z = rng.standard_normal(shape + (nl, nl)) + 1j * rng.standard_normal(shape + (nl, nl))
        z[..., 0] = z[..., 0].real * np.sqrt(2.0)
        z = z * band
        count = band.sum()
        return z * np.sqrt(4.0 * np.pi / (2.0 * count))

    def initial_state(self, rng) -> dict:
        cfg = self.cfg
        sht = self.sht
        slow = cfg.slow_amplitude * self._noise(rng, (), self.slow_mask)
        phase = 0
        zeta = self.forcing.zeta_target[phase] + 0.01 * self.lap * slow + 0.5 * self._noise(rng, (cfg.layers,), self.eddy_mask) * cfg.jet_speed[-1]
        ts = np.where(self.ocean, self.forcing.sst[phase], self._ts_eq(phase, slow))
        t_eq = self.forcing.t_rad[phase] + 4.0 * sht.synthesis(slow)
        lam = 0.5 * cfg.coupling
        t_eq[0] = (1.0 - lam) * t_eq[0] + lam * (ts - 6.0)
        band = (self.lap < 0) & (self.lap >= -42) & self.mask
        temp = sht.analysis(t_eq + 3.0 * sht.synthesis(self._noise(rng, (cfg.layers,), band)))
        tg = sht.synthesis(temp)
        if cfg.layers <= 2:
            rh = np.array([0.8, 0.45])[: cfg.layers, None, None]
        else:
            rh = np.linspace(0.8, 0.3, cfg.layers)[:, None, None]
        self.rh = rh
        q = sht.analysis(_q_target(rh, tg, self.forcing.t_rad[phase]))
        return {"zeta": zeta, "temp": temp, "q": q, "slow": slow, "ts": ts, "prev": None}

    def _ts_eq(self, phase, slow_grid_or_spec):
        slow = slow_grid_or_spec
        if np.iscomplexobj(slow):
            slow = self.sht.synthesis(slow)
        return 232.0 + 0.2 * self.forcing.dswrf[phase] - 6.5e-3 * self.z_s + 4.0 * slow

    def tendencies(self, st: dict, phase: int) -> dict:
        """Explicit parts of every tendency."""
        cfg = self.cfg
        sht = self.sht
        fs, cp = cfg.forcing_strength, cfg.coupling
        fc = self.forcing
        slow_grid = sht.synthesis(st["slow"])
        psi = st["zeta"] * self.inv_lap
        stack = np.concatenate([psi, st["zeta"] + self.f_cor, st["temp"], st["q"]], axis=0)
        dth, dph = sht.gradient(stack)
        nk = cfg.layers
        u, v = dth[:nk], dph[:nk]
        tg = sht.synthesis(st["temp"])
        out = {}
        if cp != 0.0:
            adv = _advect(u[None], v[None], dth[nk:].reshape(3, nk, *dth.shape[1:]), dph[nk:].reshape(3, nk, *dph.shape[1:]))
            adv_spec = sht.analysis(adv)
        else:
            adv_spec = np.zeros((3, nk) + st["zeta"].shape[1:], dtype=complex)
        # vorticity: advection, relaxation to the jet plus the slow imprint, layer exchange
        zt = fc.zeta_target[phase] + 0.01 * self.lap[None] * st["slow"]
        n_zeta = -cp * adv_spec[0] + fs * (1.0 / 20.0) * zt
        if nk > 1:
            mean = st["zeta"].mean(axis=0, keepdims=True)
            n_zeta = n_zeta + cp * (1.0 / 15.0) * nk / (nk - 1) * mean
        # temperature: layer 0 feels the surface
        t_target = fc.t_rad[phase] + 4.0 * slow_grid
        lam = 0.5 * cp
        t_target = t_target.copy()
        t_target[0] = (1.0 - lam) * t_target[0] + lam * (st["ts"] - 6.0)
        n_temp = -cp * adv_spec[1] + fs * (1.0 / 15.0) * sht.analysis(t_target)
        n_q = -cp * adv_spec[2] + fs * (1.0 / 8.0) * sht.analysis(_q_target(self.rh, tg, fc.t_rad[phase]))
        n_slow = cp * cfg.slow_excitation * (st["zeta"][0] - fc.zeta_target[phase][0]) * self.slow_mask
        out.update(zeta=n_zeta, temp=n_temp, q=n_q, slow=n_slow, u=u, v=v, tg=tg, slow_grid=slow_grid)
        return out

    def implicit_rates(self) -> dict:
        cfg = self.cfg
        fs, cp = cfg.forcing_strength, cfg.coupling
        nk = cfg.layers
        drag = np.zeros((nk, 1, 1))
        drag[0] = 1.0 / 10.0
        exch = cp * (1.0 / 15.0) * nk / (nk - 1) if nk > 1 else 0.0
        return {
            "zeta": fs * (1.0 / 20.0) + cfg.damping * drag + exch + self.hyper[None],
            "temp": fs * (1.0 / 15.0) + self.kappa[None],
            "q": fs * (1.0 / 8.0) + self.kappa[None],
            "slow": cfg.damping / cfg.slow_timescale,
        }

    def step(self, st: dict, step_index: int, rng) -> dict:
        """Advance one stored step using ``substeps`` AB2 / backward-Euler substeps."""
        cfg = self.cfg
        dt = cfg.step_length / cfg.substeps
        phase = int(step_index % cfg.period)
        rates = self.implicit_rates()
        fs, cp = cfg.forcing_strength, cfg.coupling
        for _ in range(cfg.substeps):
            n = self.tendencies(st, phase)
            prev = st["prev"]
            new = {}
            for key in ("zeta", "temp", "q", "slow"):
                expl = n[key] if prev is None else 1.5 * n[key] - 0.5 * prev[key]
                new[key] = (st[key] + dt * expl) / (1.0 + dt * rates[key])
                new[key] = new[key] * self.mask
            if fs != 0.0 and cfg.eddy_forcing != 0.0:
                new["zeta"] = new["zeta"] + fs * cfg.eddy_forcing * math.sqrt(dt) * self._noise(rng, (cfg.layers,), self.eddy_mask)
            for key in ("zeta", "temp", "q"):
                new[key][..., 0, 0] = new[key][..., 0, 0].real
            new["zeta"][..., 0, 0] = 0.0
            # land skin temperature, backward Euler; ocean is prescribed
            r_s, r_x = fs * 0.25, cp * 0.1
            t0 = n["tg"][0]
            ts_land = (st["ts"] + dt * (r_s * self._ts_eq(phase, n["slow_grid"]) + r_x * (t0 + 6.0))) / (1.0 + dt * (r_s + r_x))
            new["ts"] = np.where(self.ocean, self.forcing.sst[phase], ts_land)
            new["prev"] = {k: n[k] for k in ("zeta", "temp", "q", "slow")}
            st = new
        return st

    def diagnose(self, st: dict) -> dict[str, np.ndarray]:
        """Grid-space prognostic channels in physical units."""
        cfg = self.cfg
        sht = self.sht
        psi = st["zeta"] * self.inv_lap
        dth, dph = sht.gradient(psi)
        tg = sht.synthesis(st["temp"])
        qg = sht.synthesis(st["q"])
        slow_grid = sht.synthesis(st["slow"])
        out = {}
        for k in range(cfg.layers):
            out[f"T_{k}"] = tg[k]
            out[f"q_{k}"] = qg[k]
            out[f"u_{k}"] = VELOCITY_SCALE * dth[k]
            out[f"v_{k}"] = VELOCITY_SCALE * dph[k]
        out["T_s"] = st["ts"]
        psi0 = sht.synthesis(psi[0])
        out["p_s"] = self.p_base + 600.0 * slow_grid + cfg.coupling * 4.0e4 * self.f_cor_grid * psi0
        return out


def simulate(config: ToyClimateConfig, seed: int, member: int | None = None,
             keep_float64: bool = False) -> EpisodeDataset:
    """Run one reference trajectory and return it with spinup discarded.

    With ``keep_float64`` the arrays keep the internal float64 precision
    instead of the float32 storage format.
    """
    cfg = config
    model = _Model(cfg)
    rng = np.random.default_rng([int(seed), 0x70C])
    st = model.initial_state(rng)
    n_total = cfg.spinup_steps + cfg.n_steps
    names = cfg.prognostic_names
    dtype = np.float64 if keep_float64 else np.float32
    n_times = cfg.n_steps + 1
    shape = (n_times, cfg.nlat, cfg.nlon)
    prog = {n: np.empty(shape, dtype=dtype) for n in names}
    for t in range(n_total + 1):
        if t >= cfg.spinup_steps:
            diag = model.diagnose(st)
            for n in names:
                field_ = diag[n]
                if not np.all(np.isfinite(field_)):
                    raise ConfigurationError(f"non-finite {n} at step {t}", step=t)
                prog[n][t - cfg.spinup_steps] = field_
        if t == n_total:
            break
        st = model.step(st, t, rng)
        if not all(np.all(np.isfinite(st[k])) for k in ("zeta", "temp", "q", "ts")):
            raise ConfigurationError(f"reference simulation became non-finite at step {t + 1}", step=t + 1)
    steps = np.arange(cfg.spinup_steps, cfg.spinup_steps + n_times)
    forcing = forcing_at(cfg, steps)
    variables: dict[str, np.ndarray] = dict(prog)
    for n in FORCING_NAMES:
        variables[n] = forcing[n].astype(dtype)
    variables["z_s"] = model.z_s.astype(dtype)
    variables["f_l"] = model.f_l.astype(dtype)
    roles = {n: "prognostic" for n in names}
    roles.update({n: "forcing" for n in FORCING_NAMES})
    roles.update({n: "invariant" for n in INVARIANT_NAMES})
    if cfg.include_derived:
        derived = _derived(cfg, variables)
        for n, arr in derived.items():
            variables[n] = arr.astype(dtype)
            roles[n] = "derived"
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "grid": {"kind": "gauss-legendre", "nlat": cfg.nlat, "nlon": cfg.nlon},
        "seed": int(seed),
        "member": member,
        "spinup_discarded": cfg.spinup_steps,
        "time_origin": cfg.spinup_steps,
        "n_times": n_times,
        "period": cfg.period,
        "calendar": {"steps_per_year": cfg.period, "years": cfg.n_steps / cfg.period},
        "sigma": list(cfg.sigma),
        "g": cfg.g,
        "config": cfg.to_dict(),
        "channel_mapping": "K layers x (T, q, u, v) + (T_s, p_s)",
        "byte_order": "little",
        "variables": [
            {
                "name": n,
                "role": roles[n],
                "units": _units(n),
                "shape": list(variables[n].shape),
                "dtype": "<f4" if dtype == np.float32 else "<f8",
                "file": f"{n}.f32" if dtype == np.float32 else f"{n}.f64",
            }
            for n in variables
        ],
    }
    return EpisodeDataset(manifest, variables)


def member_seeds(master_seed: int, n_members: int) -> list[int]:
    ss = np.random.SeedSequence(int(master_seed))
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in ss.spawn(n_members)]


def make_ensemble(config: ToyClimateConfig, n_members: int, master_seed: int,
                  jobs: int = 1) -> list[EpisodeDataset]:
    """``n_members`` simulations sharing forcing and invariants, one seed each."""
    if n_members < 2:
        raise InvalidArgumentError("an ensemble needs at least 2 members")
    seeds = member_seeds(master_seed, n_members)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(simulate, config, s, i) for i, s in enumerate(seeds)]
            members = [f.result() for f in futures]
    else:
        members = [simulate(config, s, i) for i, s in enumerate(seeds)]
    for ds in members:
        ds.manifest["master_seed"] = int(master_seed)
    return members


# -- diagnostics --------------------------------------------------------------
def pattern_correlation(a: np.ndarray, b: np.ndarray, grid: SphericalGrid) -> float:
    """Area-weighted correlation of two fields after removing their zonal means."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    cov = area_weighted_mean(a * b, grid)
    va = area_weighted_mean(a * a, grid)
    vb = area_weighted_mean(b * b, grid)
    return float(cov / np.sqrt(va * vb))


def member_correlation(a: EpisodeDataset, b: EpisodeDataset, variable: str = "v_0") -> np.ndarray:
    """Per-step eddy pattern correlation between two members."""
    grid = a.grid
    xa, xb = a.variables[variable], b.variables[variable]
    return np.array([pattern_correlation(xa[t], xb[t], grid) for t in range(len(xa))])


def max_initial_correlation(members: list[EpisodeDataset], variable: str = "v_0") -> float:
    grid = members[0].grid
    worst = -1.0
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            worst = max(worst, pattern_correlation(members[i].variables[variable][0],
                                                   members[j].variables[variable][0], grid))
    return worst


# -- I/O ---------------------------------------------------------------------
def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_write(ds: EpisodeDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for entry in ds.manifest["variables"]:
        arr = ds.variables[entry["name"]]
        dtype = np.dtype(entry["dtype"])
        _atomic_write_bytes(path / entry["file"], np.ascontiguousarray(arr, dtype=dtype).tobytes())
    _atomic_write_bytes(path / "manifest.json", json.dumps(ds.manifest, indent=1, sort_keys=True).encode())
    return path


def dataset_read(path) -> EpisodeDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CorruptDatasetError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"unreadable manifest in {path}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersionError(f"dataset schema version {version!r} is not supported (want {SCHEMA_VERSION})")
    variables = {}
    for entry in manifest["variables"]:
        name = entry["name"]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        fpath = path / entry["file"]
        if not fpath.exists():
            raise CorruptDatasetError(f"payload for {name} is missing", variable=name)
        raw = fpath.read_bytes()
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(raw) != expected:
            raise CorruptDatasetError(
                f"payload for {name} has {len(raw)} bytes, manifest declares {expected}", variable=name
            )
        variables[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return EpisodeDataset(manifest, variables)
