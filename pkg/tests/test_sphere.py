import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import bandlimited
from sphemu import kernels
from sphemu.errors import InvalidArgumentError, InvalidDataError
from sphemu.sphere import (
    GridField,
    SpectralCoeffs,
    area_weighted_mean,
    build_grid,
    get_sht,
    n_coeffs,
    roundtrip_filter,
    sht_forward,
    sht_inverse,
)


def test_two_point_gauss_legendre_closed_form():
    x, w = kernels.gauss_legendre(2)
    np.testing.assert_allclose(np.sort(x), [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
    np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-15)


def test_gauss_legendre_matches_numpy_reference():
    x, w = kernels.gauss_legendre(32)
    xr, wr = np.polynomial.legendre.leggauss(32)
    order = np.argsort(x)
    np.testing.assert_allclose(x[order], xr, atol=1e-14)
    np.testing.assert_allclose(w[order], wr, atol=1e-14)


def test_grid_invariants():
    g = build_grid(32)
    assert g.nlon == 64
    assert abs(g.quad_weights.sum() - 2.0) < 1e-13
    assert abs(g.area_weights.sum() / g.nlat - 1.0) < 1e-12
    assert np.all(np.diff(g.colatitudes) > 0)
    assert 0 < g.colatitudes[0] and g.colatitudes[-1] < np.pi


def test_quadrature_integrates_cos_squared():
    g = build_grid(32)
    assert abs(np.sum(g.quad_weights * g.costheta**2) - 2 / 3) < 1e-13


@pytest.mark.parametrize("nlat", [0, 2, 3])
def test_build_grid_rejects_small(nlat):
    with pytest.raises(InvalidArgumentError):
        build_grid(nlat)


def _field(g, fn):
    th = g.colatitudes[:, None]
    ph = g.longitudes[None, :]
    return GridField(np.broadcast_to(fn(th, ph), g.shape).copy(), g)


def test_constant_projects_on_y00():
    g = build_grid(16)
    c = sht_forward(_field(g, lambda th, ph: 3.0 + 0 * th))
    assert abs(c[0, 0][0] - 3.0 * np.sqrt(4 * np.pi)) < 1e-12
    rest = np.delete(c.coefficients[0], 0)
    assert np.max(np.abs(rest)) < 1e-12


def test_cos_theta_projects_on_y10():
    g = build_grid(16)
    c = sht_forward(_field(g, lambda th, ph: np.cos(th) + 0 * ph))
    assert abs(c[1, 0][0] - np.sqrt(4 * np.pi / 3)) < 1e-12
    mask = np.ones(c.coefficients.shape[1], bool)
    mask[1] = False
    assert np.max(np.abs(c.coefficients[0][mask])) < 1e-12


def test_coefficient_storage_and_real_m0():
    g = build_grid(16)
    rng = np.random.default_rng(0)
    c = sht_forward(GridField(rng.standard_normal(g.shape), g))
    assert c.coefficients.shape == (1, n_coeffs(15))
    m0 = [l * (l + 1) // 2 for l in range(16)]
    assert np.max(np.abs(c.coefficients[0, m0].imag)) < 1e-12


def test_inverse_of_zero_and_constant():
    g = build_grid(16)
    zero = SpectralCoeffs(15, np.zeros(n_coeffs(15)))
    assert np.all(sht_inverse(zero, g).data == 0)
    one = np.zeros(n_coeffs(15), complex)
    one[0] = np.sqrt(4 * np.pi)
    np.testing.assert_allclose(sht_inverse(SpectralCoeffs(15, one), g).data, 1.0, atol=1e-12)


def test_single_mode_reanalysis():
    g = build_grid(16)
    c = np.zeros(n_coeffs(15), complex)
    c[2 * 3 // 2 + 1] = 1.0  # (l, m) = (2, 1)
    f = sht_inverse(SpectralCoeffs(15, c), g)
    back = sht_forward(f)
    assert abs(back[2, 1][0] - 1.0) < 1e-10
    # the synthesized pattern is 2 Re(Y_21)
    th, ph = g.colatitudes[:, None], g.longitudes[None, :]
    y21 = -np.sqrt(15 / (8 * np.pi)) * np.sin(th) * np.cos(th) * np.exp(1j * ph)
    np.testing.assert_allclose(f.data[0], 2 * y21.real, atol=1e-12)


def test_inverse_rejects_lmax_above_grid():
    g = build_grid(8)
    with pytest.raises(InvalidArgumentError):
        sht_inverse(SpectralCoeffs(8, np.zeros(n_coeffs(8))), g)


def test_forward_rejects_non_finite():
    g = build_grid(8)
    f = GridField(np.zeros(g.shape), g)
    f.data[0, 0, 0] = np.nan
    with pytest.raises(InvalidDataError):
        sht_forward(f)


def test_roundtrip_32x64_precision_parseval_and_speed():
    import time

    t0 = time.perf_counter()
    sht = get_sht(32, 64, 31)
    rng = np.random.default_rng(1)
    f = bandlimited(sht, 16, rng)
    c = sht.analysis(f)
    back = sht.synthesis(c)
    assert time.perf_counter() - t0 < 5.0
    assert np.max(np.abs(back - f)) < 1e-10
    power = (np.abs(c[:, 0]) ** 2).sum() + 2 * (np.abs(c[:, 1:]) ** 2).sum()
    lhs = area_weighted_mean(f**2, sht.grid)
    assert abs(lhs - power / (4 * np.pi)) / lhs < 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    sht = get_sht(16, 32, 15)
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, 16, 32))
    lhs = sht.analysis(a * f + b * g)
    rhs = a * sht.analysis(f) + b * sht.analysis(g)
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, abs(a) + abs(b)) * 10


@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 12, 16, 24]))
def test_roundtrip_property(seed, nlat):
    sht = get_sht(nlat, 2 * nlat, nlat - 1)
    f = bandlimited(sht, nlat // 2, np.random.default_rng(seed))
    assert np.max(np.abs(sht.synthesis(sht.analysis(f)) - f)) < 1e-10


@given(st.integers(0, 2**32 - 1))
def test_filter_idempotent_and_truncating(seed):
    g = build_grid(16)
    sht = get_sht(16, 32, 15)
    rng = np.random.default_rng(seed)
    f = GridField(rng.standard_normal(g.shape), g)
    once = roundtrip_filter(f, 6)
    np.testing.assert_allclose(roundtrip_filter(once, 6).data, once.data, atol=1e-10)
    low = GridField(bandlimited(sht, 6, rng), g)
    np.testing.assert_allclose(roundtrip_filter(low, 6).data, low.data, atol=1e-10)


def test_filter_removes_next_degree():
    g = build_grid(16)
    c = np.zeros(n_coeffs(15), complex)
    c[7 * 8 // 2] = 1.0  # (7, 0)
    f = sht_inverse(SpectralCoeffs(15, c), g)
    assert np.max(np.abs(roundtrip_filter(f, 6).data)) < 1e-10


def test_area_weighted_mean_examples():
    g = build_grid(32)
    th = g.colatitudes[:, None] + 0 * g.longitudes[None, :]
    assert area_weighted_mean(np.full(g.shape, 2.5), g) == pytest.approx(2.5, abs=1e-13)
    assert abs(area_weighted_mean(np.cos(th), g)) < 1e-13
    assert abs(area_weighted_mean(np.cos(th) ** 2, g) - 1 / 3) < 1e-10


@given(st.integers(0, 2**32 - 1))
def test_latitude_constant_mean_equals_longitude_mean(seed):
    g = build_grid(8)
    row = np.random.default_rng(seed).standard_normal(g.nlon)
    f = np.broadcast_to(row, g.shape)
    assert abs(area_weighted_mean(f, g) - row.mean()) < 1e-12


def test_fft_path_matches_dft():
    rng = np.random.default_rng(2)
    a = get_sht(16, 32, 15)
    b = get_sht(16, 32, 15, use_fft=True)
    f = rng.standard_normal((3, 16, 32))
    np.testing.assert_allclose(a.analysis(f), b.analysis(f), atol=1e-12)
