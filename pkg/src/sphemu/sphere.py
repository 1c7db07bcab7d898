"""Gaussian grids and spherical harmonic transforms.

Conventions: orthonormal complex harmonics with Condon-Shortley phase,
``Y_lm(theta, phi) = P_lm(cos theta) exp(i m phi)``, real fields stored with
``m >= 0`` only.  A real field is synthesized as

    f = sum_l [ c_l0 Y_l0 + 2 Re sum_{m>0} c_lm Y_lm ].

Dense coefficient arrays have trailing shape ``(lmax + 1, lmax + 1)``
indexed ``[l, m]``; entries with ``m > l`` are always zero.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from sphemu import kernels
from sphemu.errors import InvalidArgumentError, InvalidDataError


@dataclass(frozen=True, eq=False)
class SphericalGrid:
    nlat: int
    nlon: int
    colatitudes: np.ndarray
    quad_weights: np.ndarray
    area_weights: np.ndarray

    @property
    def costheta(self) -> np.ndarray:
        return np.cos(self.colatitudes)

    @property
    def latitudes(self) -> np.ndarray:
        """Latitudes in degrees, north to south."""
        return 90.0 - np.degrees(self.colatitudes)

    @property
    def longitudes(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.nlon) / self.nlon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    def matches(self, other: "SphericalGrid") -> bool:
        return self.nlat == other.nlat and self.nlon == other.nlon

    def to_dict(self) -> dict:
        return {"nlat": self.nlat, "nlon": self.nlon, "kind": "gaussian"}


def build_grid(nlat: int, nlon: int | None = None) -> SphericalGrid:
    """Gauss-Legendre latitude grid with ``nlon = 2 * nlat`` equispaced longitudes."""
    if int(nlat) != nlat or nlat < 4:
        raise InvalidArgumentError(f"nlat must be an integer >= 4, got {nlat}")
    nlat = int(nlat)
    nlon = 2 * nlat if nlon is None else int(nlon)
    if nlon % 2 or nlon < 2 * (nlat - 1) + 2:
        raise InvalidArgumentError(f"nlon must be even and >= 2*nlat, got {nlon}")
    return _build_grid(nlat, nlon)


@functools.lru_cache(maxsize=None)
def _build_grid(nlat: int, nlon: int) -> SphericalGrid:
    x, w = kernels.gauss_legendre(nlat)
    colat = np.arccos(x)
    area = w * nlat / 2.0
    for arr in (colat, w, area):
        arr.setflags(write=False)
    return SphericalGrid(nlat, nlon, colat, w, area)


@dataclass(eq=False)
class GridField:
    """Multi-channel real field of shape ``(channels, nlat, nlon)``."""

    data: np.ndarray
    grid: SphericalGrid
    names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1:] != self.grid.shape:
            raise InvalidArgumentError(
                f"field shape {data.shape} inconsistent with grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise InvalidDataError("field contains non-finite values")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(eq=False)
class SpectralCoeffs:
    """Packed triangular coefficients, ``(channels, (lmax+1)(lmax+2)/2)`` complex.

    Packing order is ``l`` major: index ``l*(l+1)/2 + m``.
    """

    lmax: int
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.complex128)
        if c.ndim == 1:
            c = c[None]
        if c.shape[-1] != n_coeffs(self.lmax):
            raise InvalidArgumentError(
                f"expected {n_coeffs(self.lmax)} coefficients for lmax={self.lmax}, got {c.shape[-1]}"
            )
        self.coefficients = c

    def __getitem__(self, lm):
        l, m = lm
        return self.coefficients[:, packed_index(l, m)]

    def dense(self) -> np.ndarray:
        return unpack(self.coefficients, self.lmax)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SpectralCoeffs":
        lmax = dense.shape[-1] - 1
        return cls(lmax, pack(dense))


def n_coeffs(lmax: int) -> int:
    return (lmax + 1) * (lmax + 2) // 2


def packed_index(l: int, m: int) -> int:
    if not 0 <= m <= l:
        raise InvalidArgumentError(f"need 0 <= m <= l, got l={l}, m={m}")
    return l * (l + 1) // 2 + m


@functools.lru_cache(maxsize=None)
def _tri_indices(lmax: int):
    ls, ms = np.tril_indices(lmax + 1)
    return ls, ms


def pack(dense: np.ndarray) -> np.ndarray:
    ls, ms = _tri_indices(dense.shape[-1] - 1)
    return dense[..., ls, ms]


def unpack(packed: np.ndarray, lmax: int) -> np.ndarray:
    ls, ms = _tri_indices(lmax)
    out = np.zeros(packed.shape[:-1] + (lmax + 1, lmax + 1), dtype=packed.dtype)
    out[..., ls, ms] = packed
    return out


class SHT:
    """Precomputed forward/inverse transform for one grid and truncation.

    The ``*_pair`` methods work on real arrays with the real and imaginary
    parts stacked on a new leading axis, and come with exact adjoints for
    reverse-mode differentiation.
    """

    def __init__(self, grid: SphericalGrid, lmax: int | None = None, use_fft: bool = False):
        lmax = grid.nlat - 1 if lmax is None else int(lmax)
        if lmax < 0 or lmax > grid.nlat - 1:
            raise InvalidArgumentError(f"lmax={lmax} exceeds grid resolution (nlat={grid.nlat})")
        self.grid = grid
        self.lmax = lmax
        self.use_fft = use_fft
        nm = lmax + 1
        x = grid.costheta
        p = kernels.legendre_table(x, lmax)
        self.legendre = p
        wp = p * grid.quad_weights[:, None, None]
        # (M, I, L) / (M, L, I) layouts so each order m is one BLAS matmul
        self._p_mil = np.ascontiguousarray(p.transpose(2, 0, 1))
        self._p_mli = np.ascontiguousarray(p.transpose(2, 1, 0))
        self._wp_mil = np.ascontiguousarray(wp.transpose(2, 0, 1))
        self._wp_mli = np.ascontiguousarray(wp.transpose(2, 1, 0))
        m = np.arange(nm)
        phi = grid.longitudes
        self._cos = np.cos(np.outer(phi, m))
        self._sin = np.sin(np.outer(phi, m))
        mult = np.where(m == 0, 1.0, 2.0)
        self._dphi = 2.0 * np.pi / grid.nlon
        # (2M, J) analysis rows [cos; -sin] * dphi and synthesis rows
        self._fourier_an = np.concatenate([self._cos.T, -self._sin.T]) * self._dphi
        self._fourier_syn = np.concatenate([(self._cos * mult).T, -(self._sin * mult).T])
        self.degrees = np.arange(nm)
        self.orders = m
        self._dtheta = None

    @property
    def nl(self) -> int:
        return self.lmax + 1

    # -- real-pair transforms -------------------------------------------
    # Spectral pairs use an m-major layout ``(2, M, *lead, L)`` so the
    # longitude and Legendre stages chain as BLAS calls without copies.
    def analysis_pair(self, f: np.ndarray) -> np.ndarray:
        lead = f.shape[:-2]
        ni, nj = f.shape[-2:]
        nm = self.nl
        f2 = f.reshape(-1, nj)
        if self.use_fft:
            spec = np.fft.rfft(f2, axis=-1)[:, :nm] * self._dphi
            fm = np.stack([spec.real.T, spec.imag.T])
        else:
            fm = (self._fourier_an @ f2.T).reshape(2, nm, -1)
        fm = fm.reshape((2, nm, -1, ni))
        out = np.matmul(fm, self._wp_mil)
        return out.reshape((2, nm) + lead + (self.nl,))

    def analysis_pair_adjoint(self, g: np.ndarray) -> np.ndarray:
        nm = self.nl
        lead = g.shape[2:-1]
        gf = np.matmul(g.reshape(2, nm, -1, self.nl), self._wp_mli)
        ni = gf.shape[-1]
        out = gf.reshape(2 * nm, -1).T @ self._fourier_an
        return out.reshape(lead + (ni, self.grid.nlon))

    def synthesis_pair(self, c: np.ndarray) -> np.ndarray:
        nm = self.nl
        lead = c.shape[2:-1]
        g = np.matmul(c.reshape(2, nm, -1, self.nl), self._p_mli)
        ni = g.shape[-1]
        if self.use_fft:
            nlon = self.grid.nlon
            spec = np.zeros((g.shape[2] * ni, nlon // 2 + 1), dtype=np.complex128)
            spec[:, :nm] = (g[0] + 1j * g[1]).reshape(nm, -1).T
            spec[:, 0] = spec[:, 0].real
            f = np.fft.irfft(spec, n=nlon, axis=-1) * nlon
        else:
            f = g.reshape(2 * nm, -1).T @ self._fourier_syn
        return f.reshape(lead + (ni, self.grid.nlon))

    def synthesis_pair_adjoint(self, gf: np.ndarray) -> np.ndarray:
        lead = gf.shape[:-2]
        ni, nj = gf.shape[-2:]
        nm = self.nl
        gm = (self._fourier_syn @ gf.reshape(-1, nj).T).reshape(2, nm, -1, ni)
        out = np.matmul(gm, self._p_mil)
        return out.reshape((2, nm) + lead + (self.nl,))

    @staticmethod
    def pair_to_dense(pair: np.ndarray) -> np.ndarray:
        """``(2, M, *lead, L)`` real pair to complex ``(*lead, L, M)``."""
        c = pair[0] + 1j * pair[1]
        return np.moveaxis(c, 0, -1)

    @staticmethod
    def dense_to_pair(c: np.ndarray) -> np.ndarray:
        c = np.moveaxis(np.asarray(c), -1, 0)
        return np.stack([c.real, c.imag])

    # -- complex convenience --------------------------------------------
    def analysis(self, f: np.ndarray) -> np.ndarray:
        """Real grid ``(..., I, J)`` to dense complex ``(..., L, M)``."""
        return self.pair_to_dense(self.analysis_pair(np.asarray(f, dtype=np.float64)))

    def synthesis(self, c: np.ndarray) -> np.ndarray:
        return self.synthesis_pair(self.dense_to_pair(c))

    def gradient(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(d f / d theta, (1 / sin theta) d f / d phi)`` on the grid."""
        if self._dtheta is None:
            d = kernels.legendre_dtheta(self.grid.costheta, self.legendre)
            self._dtheta = np.ascontiguousarray(d.transpose(2, 1, 0))
        pair = self.dense_to_pair(c)
        nm = self.nl
        lead = pair.shape[2:-1]
        g = np.matmul(pair.reshape(2, nm, -1, self.nl), self._dtheta)
        ni = g.shape[-1]
        dtheta = (g.reshape(2 * nm, -1).T @ self._fourier_syn).reshape(lead + (ni, self.grid.nlon))
        dphi = self.synthesis(1j * self.orders * np.asarray(c))
        return dtheta, dphi / np.sin(self.grid.colatitudes)[:, None]

    def laplacian_eigenvalues(self) -> np.ndarray:
        """``-l(l+1)`` broadcast over the dense ``(l, m)`` layout."""
        l = self.degrees.astype(np.float64)
        return np.broadcast_to((-l * (l + 1.0))[:, None], (self.nl, self.nl))

    def mask(self) -> np.ndarray:
        return self.degrees[:, None] >= self.orders[None, :]


@functools.lru_cache(maxsize=64)
def get_sht(nlat: int, nlon: int, lmax: int, use_fft: bool = False) -> SHT:
    return SHT(build_grid(nlat, nlon), lmax, use_fft=use_fft)


def _sht_for(grid: SphericalGrid, lmax: int | None) -> SHT:
    lmax = grid.nlat - 1 if lmax is None else lmax
    if lmax > grid.nlat - 1:
        raise InvalidArgumentError(f"lmax={lmax} exceeds grid resolution (nlat={grid.nlat})")
    return get_sht(grid.nlat, grid.nlon, int(lmax))


def sht_forward(f: GridField, lmax: int | None = None) -> SpectralCoeffs:
    if not np.all(np.isfinite(f.data)):
        raise InvalidDataError("non-finite input to sht_forward")
    sht = _sht_for(f.grid, lmax)
    return SpectralCoeffs.from_dense(sht.analysis(f.data))


def sht_inverse(c: SpectralCoeffs, grid: SphericalGrid) -> GridField:
    sht = _sht_for(grid, c.lmax)
    return GridField(sht.synthesis(c.dense()), grid)


def roundtrip_filter(f: GridField, lmax_keep: int) -> GridField:
    """Project onto harmonics with degree ``l <= lmax_keep``."""
    if lmax_keep > f.grid.nlat - 1 or lmax_keep < 0:
        raise InvalidArgumentError(f"lmax_keep={lmax_keep} outside [0, {f.grid.nlat - 1}]")
    sht = _sht_for(f.grid, None)
    c = sht.analysis(f.data)
    c[..., lmax_keep + 1 :, :] = 0.0
    return GridField(sht.synthesis(c), f.grid, f.names)


def area_weighted_mean(f, grid: SphericalGrid | None = None) -> np.ndarray:
    """``(1 / (I J)) sum_ij w(i) f_ij`` over the last two axes.

    Accepts a :class:`GridField` or a raw array with a grid.
    """
    if isinstance(f, GridField):
        data, grid = f.data, f.grid
    else:
        data = np.asarray(f, dtype=np.float64)
    if grid is None:
        raise InvalidArgumentError("a grid is required for raw arrays")
    if data.shape[-2:] != grid.shape:
        raise InvalidArgumentError(f"array shape {data.shape} does not match grid {grid.shape}")
    return np.einsum("...ij,i->...", data, grid.area_weights) / (grid.nlat * grid.nlon)
