import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sphemu import metrics as M
from sphemu.errors import GridMismatchError, InvalidArgumentError
from sphemu.sphere import build_grid

GRID = build_grid(8, 16)


def const_fields(values, grid=GRID):
    """Ensemble whose every cell holds the same value; acts like a one-cell grid."""
    values = np.asarray(values, dtype=np.float64)
    return np.broadcast_to(values[..., None, None], values.shape + grid.shape).copy()


def random_ensemble(rng, n_ens, channels=2, grid=GRID):
    x = rng.standard_normal((n_ens, channels) + grid.shape)
    y = rng.standard_normal((channels,) + grid.shape)
    return x, y


# -- time_mean / zonal_mean -----------------------------------------------------
def test_time_mean_examples(rng):
    assert np.all(M.time_mean(np.full((7, 4, 8), 2.5)) == 2.5)
    alt = np.array([1.0, -1.0] * 5)[:, None, None] * np.ones((10, 4, 8))
    assert np.all(M.time_mean(alt) == 0.0)
    trace = rng.standard_normal((50, 4, 8))
    oracle = np.zeros((4, 8))
    for t in range(10, 40):
        oracle += trace[t]
    oracle /= 30
    assert np.abs(M.time_mean(trace, 10, 40) - oracle).max() < 1e-12


@pytest.mark.parametrize("start,stop", [(5, 5), (6, 5), (-1, 3), (0, 11)])
def test_time_mean_rejects_empty_range(start, stop):
    with pytest.raises(InvalidArgumentError):
        M.time_mean(np.zeros((10, 4, 8)), start, stop)


def test_zonal_mean_examples(rng):
    assert np.all(M.zonal_mean(np.full((4, 8), 3.0)) == 3.0)
    lon = GRID.longitudes
    wave = np.sin(3 * lon)[None, :] * np.ones((8, 1))
    assert np.abs(M.zonal_mean(wave)).max() < 1e-12
    f = rng.standard_normal((8, 16))
    oracle = [sum(f[i, j] for j in range(16)) / 16 for i in range(8)]
    assert np.abs(M.zonal_mean(f) - oracle).max() < 1e-12


# -- member-wise scores -----------------------------------------------------------
@given(c=st.floats(-50, 50))
def test_constant_offset(c):
    y = np.random.default_rng(0).standard_normal((2,) + GRID.shape)
    x = np.stack([y + c] * 3)
    assert np.allclose(M.bias(x, y, GRID), c, atol=1e-12)
    assert np.allclose(M.mae(x, y, GRID), abs(c), atol=1e-12)
    assert np.allclose(M.rmse(x, y, GRID), abs(c), atol=1e-12)


def test_perfect_forecast_scores_zero(rng):
    y = rng.standard_normal((3,) + GRID.shape)
    x = np.stack([y, y])
    for name in ("bias", "mae", "rmse", "rmse_ens", "spread", "crps"):
        assert np.all(M.score_all(x, y, GRID)[name] == 0.0), name


def test_two_member_hand_case():
    x = const_fields([[0.0], [2.0]])
    y = const_fields([1.0])
    s = M.score_all(x, y, GRID)
    assert s["bias"][0] == pytest.approx(0.0, abs=1e-15)
    assert s["mae"][0] == pytest.approx(1.0, rel=1e-14)
    assert s["rmse"][0] == pytest.approx(1.0, rel=1e-14)
    assert s["rmse_ens"][0] == pytest.approx(0.0, abs=1e-15)
    assert s["spread"][0] == pytest.approx(math.sqrt(2.0), rel=1e-14)
    # skill 1 minus pair term (|0-2| + |2-0|) / (2 * 2 * 1)
    assert s["crps"][0] == pytest.approx(0.0, abs=1e-15)


def test_rmse_averages_member_roots():
    x = const_fields([[1.0], [3.0]])
    y = const_fields([0.0])
    assert M.rmse(x, y, GRID)[0] == pytest.approx(2.0)  # pooled would give sqrt(5)


def test_identical_members():
    y = const_fields([0.0])
    x = const_fields([[1.5], [1.5], [1.5]])
    assert M.rmse_ens(x, y, GRID)[0] == pytest.approx(M.rmse(x, y, GRID)[0])
    assert M.spread(x, GRID)[0] == 0.0
    assert M.ssr(x, y, GRID)[0] == 0.0


def test_grid_mismatch(rng):
    x, y = random_ensemble(rng, 3)
    with pytest.raises(GridMismatchError):
        M.mae(x, y[..., :8], GRID)
    with pytest.raises(GridMismatchError):
        M.mae(x[:, :1], y, GRID)
    with pytest.raises(InvalidArgumentError):
        M.mae(x[0, 0], y[0], GRID)


# -- single-member ensembles --------------------------------------------------------
def test_single_member(rng):
    x, y = random_ensemble(rng, 1)
    assert np.array_equal(M.crps(x, y, GRID), M.mae(x, y, GRID))
    assert np.all(np.isnan(M.spread(x, GRID)))
    assert np.all(np.isnan(M.ssr(x, y, GRID)))
    area, field_ = M.variability(x, GRID)
    assert np.all(np.isnan(area)) and np.all(np.isnan(field_))


def test_single_member_report_marks_undefined(rng):
    x, y = random_ensemble(rng, 1)
    rep = M.build_report(x, y, GRID, ["a", "b"])
    lines = rep.to_csv().splitlines()
    assert "a,spread,undefined" in lines and "b,ssr,undefined" in lines
    doc = json.loads(rep.to_json())
    assert doc["rows"]["a"]["spread"] is None
    assert doc["rows"]["a"]["crps"] == doc["rows"]["a"]["mae"]


# -- ensemble scores ---------------------------------------------------------------
@given(n_ens=st.integers(2, 9), seed=st.integers(0, 2**16))
def test_crps_double_sum_matches_sorted_form(n_ens, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n_ens, 3, 5)) * r.uniform(0.1, 10)
    y = r.standard_normal((3, 5))
    assert np.abs(M.crps_cells(x, y) - M.crps_sorted(x, y)).max() < 1e-10


def test_crps_matches_literal_loop(rng):
    x = rng.standard_normal((5, 3, 4))
    y = rng.standard_normal((3, 4))
    oracle = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            skill = sum(abs(x[e, i, j] - y[i, j]) for e in range(5)) / 5
            pairs = sum(abs(x[e, i, j] - x[f, i, j]) for e in range(5) for f in range(5))
            oracle[i, j] = skill - pairs / (2 * 5 * 4)
    assert np.abs(M.crps_cells(x, y) - oracle).max() < 1e-12


@given(n_ens=st.integers(1, 8), seed=st.integers(0, 2**16))
def test_jensen_ordering(n_ens, seed):
    x, y = random_ensemble(np.random.default_rng(seed), n_ens)
    assert np.all(M.rmse_ens(x, y, GRID) <= M.rmse(x, y, GRID) + 1e-12)


def test_ssr_correction_factor(rng):
    x, y = random_ensemble(rng, 5)
    ratio = M.ssr(x, y, GRID) / M.ssr(x, y, GRID, correction=False)
    assert np.allclose(ratio, math.sqrt(6 / 5), rtol=1e-14)


@given(c=st.floats(-100, 100), seed=st.integers(0, 2**16))
def test_translation_invariance(c, seed):
    x, y = random_ensemble(np.random.default_rng(seed), 4)
    a, b = M.score_all(x, y, GRID), M.score_all(x + c, y + c, GRID)
    for name in ("mae", "rmse", "crps", "spread"):
        assert np.allclose(a[name], b[name], rtol=1e-9, atol=1e-9), name
    assert np.allclose(a["bias"], b["bias"], atol=1e-9)


@given(s=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
def test_positive_homogeneity(s, seed):
    x, y = random_ensemble(np.random.default_rng(seed), 4)
    a, b = M.score_all(x, y, GRID), M.score_all(s * x, s * y, GRID)
    for name in ("mae", "rmse", "crps", "spread"):
        assert np.allclose(s * a[name], b[name], rtol=1e-10), name
    assert np.allclose(a["ssr"], b["ssr"], rtol=1e-10)


@pytest.mark.parametrize("nlat", [4, 6, 12, 24])
def test_weight_invariance_for_latitude_constant_fields(nlat):
    nlon = 48
    lon = build_grid(nlat, nlon).longitudes
    x = np.stack([np.sin(lon + e) + 0.3 * e for e in range(3)])[:, None, None, :]
    y = np.cos(2 * lon)[None, None, :]
    coarse = build_grid(4, nlon)
    g = build_grid(nlat, nlon)
    a = M.score_all(np.broadcast_to(x, (3, 1, 4, nlon)), np.broadcast_to(y, (1, 4, nlon)), coarse)
    b = M.score_all(np.broadcast_to(x, (3, 1, nlat, nlon)), np.broadcast_to(y, (1, nlat, nlon)), g)
    for name in M.METRICS:
        assert np.abs(a[name] - b[name]).max() < 1e-10, name


@given(x=arrays(np.float64, (4, 1, 8, 16), elements=st.floats(-1e3, 1e3)))
def test_scores_nonnegative(x):
    y = x[0] * 0.5
    s = M.score_all(x, y, GRID)
    for name in ("mae", "rmse", "rmse_ens", "spread", "crps"):
        assert np.all(s[name] >= -1e-9), name


# -- noise floor --------------------------------------------------------------------
def test_noise_floor_zero_for_identical_members(rng):
    val = rng.standard_normal((2,) + GRID.shape)
    nf = M.noise_floor([val.copy() for _ in range(3)], val, GRID)
    assert np.all(nf.mean == 0.0)
    assert np.all(nf.ensemble_mean_rmse < 1e-15)  # mean of copies rounds


def test_noise_floor_constant_offsets(rng):
    val = rng.standard_normal((2,) + GRID.shape)
    offsets = [0.5, -1.5, 2.0]
    nf = M.noise_floor([val + c for c in offsets], val, GRID)
    assert np.allclose(nf.mean, np.mean(np.abs(offsets)), rtol=1e-12)
    assert np.allclose(nf.std, np.std(np.abs(offsets)), rtol=1e-12)
    assert np.allclose(nf.member_scores[:, 0], np.abs(offsets), rtol=1e-12)
    assert np.allclose(nf.ensemble_mean_rmse, abs(np.mean(offsets)), rtol=1e-12)


def test_noise_floor_rejects_validation_in_reference(rng):
    val = rng.standard_normal((2,) + GRID.shape)
    other = val + 1
    with pytest.raises(InvalidArgumentError):
        M.noise_floor([other, val], val, GRID)
    with pytest.raises(InvalidArgumentError):
        M.noise_floor(np.stack([other, other]), val, GRID, reference_ids=[0, 3], validation_id=3)
    with pytest.raises(InvalidArgumentError):
        M.noise_floor([other], val, GRID)


# -- variability --------------------------------------------------------------------
def test_variability_identical_members(rng):
    x = np.stack([rng.standard_normal((2,) + GRID.shape)] * 4)
    area, field_ = M.variability(x, GRID)
    assert np.all(area == 0.0) and np.all(field_ == 0.0)


def test_variability_single_cell_difference():
    x = np.zeros((2, 1) + GRID.shape)
    x[0, 0, 3, 5] = 0.7
    x[1, 0, 3, 5] = -0.7
    _, field_ = M.variability(x, GRID)
    assert field_[0, 3, 5] == pytest.approx(0.7 * math.sqrt(2))
    field_[0, 3, 5] = 0.0
    assert np.all(field_ == 0.0)


def test_variability_two_pass_oracle(rng):
    x = rng.standard_normal((6, 2) + GRID.shape) * 3 + 100
    area, field_ = M.variability(x, GRID)
    mean = x.sum(axis=0) / 6
    oracle = np.sqrt(((x - mean) ** 2).sum(axis=0) / 5)
    assert np.abs(field_ - oracle).max() < 1e-10
    w = GRID.area_weights
    assert np.abs(area - (oracle * w[:, None]).mean(axis=(-2, -1))).max() < 1e-10


# -- weather vs climate --------------------------------------------------------------
def test_weather_vs_climate_examples(rng):
    val = rng.standard_normal((20, 2) + GRID.shape)
    short, tm = M.weather_vs_climate(val, val, GRID, 5)
    assert np.all(short == 0.0) and np.all(tm == 0.0)
    short, tm = M.weather_vs_climate(val - 0.25, val, GRID, 5)
    assert np.allclose(short, 0.25, rtol=1e-12) and np.allclose(tm, 0.25, rtol=1e-12)


def test_weather_vs_climate_window_checks(rng):
    val = rng.standard_normal((10, 1) + GRID.shape)
    with pytest.raises(InvalidArgumentError):
        M.weather_vs_climate(val, val, GRID, 11)
    with pytest.raises(InvalidArgumentError):
        M.weather_vs_climate(val, val, GRID, 3, full_range=(4, 12))
    with pytest.raises(GridMismatchError):
        M.weather_vs_climate(val[:9], val, GRID, 3)


# -- report I/O -----------------------------------------------------------------------
def test_report_round_trip(rng, tmp_path):
    x, y = random_ensemble(rng, 3)
    floor = M.noise_floor(x + 0.1, y, GRID)
    rep = M.build_report(x, y, GRID, ["a", "b"], metadata={"seed": 4}, floor=floor)
    csv_path, json_path = rep.write(tmp_path)
    back = M.EvalReport.from_json(json_path.read_text())
    assert back.variables == ["a", "b"]
    assert back.metadata["seed"] == 4 and back.metadata["ensemble_size"] == 3
    for var in back.variables:
        for metric, v in rep.rows[var].items():
            assert back.rows[var][metric] == v
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "variable,metric,value"
    assert len(lines) == 1 + 2 * len(rep.rows["a"])
    assert "rmse_vs_floor_pct" in rep.rows["a"] and "rmse_ens_vs_floor_pct" in rep.rows["a"]


def test_report_deterministic(rng):
    x, y = random_ensemble(rng, 4)
    assert M.build_report(x, y, GRID, ["a", "b"]).to_json() == M.build_report(x, y, GRID, ["a", "b"]).to_json()


def test_map_exports(rng, tmp_path):
    m = rng.standard_normal(GRID.shape)
    p = M.write_map_f32(tmp_path / "m.f32", m)
    assert np.array_equal(np.fromfile(p, dtype="<f4").reshape(GRID.shape), m.astype(np.float32))
    pgm = M.write_pgm(tmp_path / "m.pgm", m).read_bytes()
    header = b"P5\n16 8\n255\n"
    assert pgm.startswith(header) and len(pgm) == len(header) + 128
    flat = M.write_pgm(tmp_path / "c.pgm", np.ones(GRID.shape)).read_bytes()
    assert set(flat[len(header):]) == {128}
