"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a single pass/fail line that pytest prints in an
"acceptance criteria" section of the terminal summary.  Criteria 7-9 share
one end-to-end desk run (about half an hour on one CPU core); set
``SPHEMU_ACCEPTANCE_DIR`` to keep its outputs.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import bandlimited
from sphemu import autodiff as ad
from sphemu import cli
from sphemu import dyffusion as dy
from sphemu import metrics as M
from sphemu.sfno import SFNO, SfnoConfig
from sphemu.sphere import area_weighted_mean, build_grid, get_sht
from sphemu.toy_climate import ToyClimateConfig, dataset_read, make_ensemble


def check(acceptance, number, title, fn):
    try:
        ok, detail = fn()
    except Exception as exc:
        acceptance.record(number, title, False, f"{type(exc).__name__}: {exc}")
        raise
    acceptance.record(number, title, ok, detail)
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------
def test_criterion_01_sht(acceptance):
    def run():
        t0 = time.perf_counter()
        sht = get_sht(32, 64, 31)
        rng = np.random.default_rng(2024)
        f = bandlimited(sht, 16, rng, channels=8)
        c = sht.analysis(f)
        err = float(np.max(np.abs(sht.synthesis(c) - f)))
        power = (np.abs(c[..., 0]) ** 2).sum(-1) + 2 * (np.abs(c[..., 1:]) ** 2).sum((-2, -1))
        energy = area_weighted_mean(f**2, sht.grid) * 4 * np.pi
        parseval = float(np.max(np.abs(energy - power) / energy))
        elapsed = time.perf_counter() - t0
        ok = err < 1e-10 and parseval < 1e-9 and elapsed < 5.0
        return ok, f"round trip {err:.1e} (<1e-10), Parseval {parseval:.1e} (<1e-9), {elapsed:.2f} s (<5 s)"

    check(acceptance, 1, "SHT correctness", run)


# -- 2 ---------------------------------------------------------------------------
def test_criterion_02_gradient(acceptance):
    def run():
        t0 = time.perf_counter()
        cfg = SfnoConfig(in_channels=24, out_channels=10, nlat=16, nlon=32, embed_dim=16, num_layers=2,
                         max_time=6, spectral_output=True)
        net = SFNO(cfg, seed=11)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 24, 16, 32))
        y = rng.standard_normal((1, 10, 16, 32))

        def loss_value():
            return float(ad.mse_loss(net([x], 3), y).data)

        with ad.Tape() as tape:
            loss = ad.mse_loss(net([x], 3), y)
        tape.backward(loss)
        worst, n_checked = 0.0, 0
        for name, p in net.params.items():
            idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
            for k in idx:
                old = p.data.flat[k]
                p.data.flat[k] = old + 1e-4
                up = loss_value()
                p.data.flat[k] = old - 1e-4
                down = loss_value()
                p.data.flat[k] = old
                fd = (up - down) / 2e-4
                an = p.grad.flat[k]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
                n_checked += 1
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-4 and elapsed < 120
        return ok, (f"max relative error {worst:.1e} (<1e-4) over {n_checked} entries of "
                    f"{len(net.params)} parameter tensors, {elapsed:.0f} s (<2 min)")

    check(acceptance, 2, "SFNO gradient fidelity", run)


# -- shared tiny emulator for 3 and 4 ------------------------------------------------
SMALL_TOY = ToyClimateConfig(nlat=16, n_steps=48, spinup_steps=8)
TINY_NET = dict(in_channels=1, out_channels=1, nlat=16, nlon=32, embed_dim=8, num_layers=2, mlp_ratio=1.0,
                spectral_output=True)
ONE_STEP = dy.TrainConfig(epochs=1, batch_size=2, max_steps_per_epoch=2, val_rollout_steps=12,
                          val_ensemble=2, val_windows=2)


@pytest.fixture(scope="module")
def small_members():
    return make_ensemble(SMALL_TOY, 3, master_seed=5)


@pytest.fixture(scope="module")
def tiny_pairs(small_members):
    pairs = {}
    for h in (3, 4, 6):
        ic, _ = dy.train_interpolator(small_members[:2], dict(TINY_NET, mlp_dropout_rate=0.1, drop_path_rate=0.1),
                                      h, ONE_STEP, validation=small_members[2])
        fc, _ = dy.train_forecaster(small_members[:2], ic, TINY_NET, ONE_STEP, validation=small_members[2])
        pairs[h] = (ic, fc)
    return pairs


def test_criterion_03_nfe(acceptance, tiny_pairs, small_members):
    def run():
        val = small_members[2]
        x0, inv = val.stack("prognostic")[0], val.stack("invariant")
        details, ok = [], True
        for h in (6, 4, 3):
            H = 24 if h == 6 else 4 * h
            emu = dy.Emulator(*tiny_pairs[h], dy.DyffusionConfig(horizon=h, inference_horizon=H, ensemble_size=1))
            forcing = dy.extend_forcing(val.stack("forcing"), val.manifest["period"], H + 1)
            emu.interp.nfe = emu.fore.nfe = 0
            trace = emu.rollout(x0, forcing, inv)
            per_window = [(n.forecaster, n.interpolator, n.total) for n in trace.nfe]
            counted = (emu.fore.nfe, emu.interp.nfe)
            want = (h, 2 * h - 3, 3 * (h - 1))
            good = (all(w == want for w in per_window) and len(per_window) == H // h
                    and counted == (h * H // h, (2 * h - 3) * H // h))
            if h == 6:
                good = good and want == (6, 9, 15) and sum(t for _, _, t in per_window) == 60
            ok = ok and good
            details.append(f"h={h} H={H}: {per_window[0][2]}/window x {len(per_window)} = "
                           f"{sum(t for _, _, t in per_window)} (forward passes counted {sum(counted)})")
        return ok, "; ".join(details)

    check(acceptance, 3, "NFE identity 3(h-1)", run)


def test_criterion_04_cold_sampling(acceptance, tiny_pairs, small_members):
    def run():
        ic, fc = tiny_pairs[6]
        val = small_members[2]
        emu = dy.Emulator(ic, fc, dy.DyffusionConfig(horizon=6, inference_horizon=24, ensemble_size=4))
        norm = emu.norm
        x_t = norm.norm_prog(val.stack("prognostic")[5].astype(np.float64))
        f = norm.norm_forcing(val.stack("forcing")[5:11].astype(np.float64))
        inv = norm.norm_inv(val.stack("invariant").astype(np.float64))
        win = emu.sample_window(x_t, f, inv, member=1, window=0, keep=True)
        first = np.array_equal(win.states[0], win.interpolated[0]) and not np.any(win.corrections[0])

        # deterministic interpolator network, forecaster that always returns the same x_h
        x_h = norm.norm_prog(val.stack("prognostic")[11].astype(np.float64))

        def interp(x0, xh, f0, i, rng):
            return dy.interpolator_forward(emu.interp, x0[None], xh[None], f0[None], inv, i, rngs=None,
                                           stochastic=False, residual=ic.residual,
                                           scale=ic.output_scale).data[0]

        res = dy.cold_sample(x_t, f, lambda xj, fj, j: x_h, interp, 6, keep=True)
        path = [interp(x_t, x_h, f[0], i, None) for i in range(1, 6)]
        telescoping = all(np.array_equal(res.states[i - 1], path[i - 1]) for i in range(1, 6))

        det = dy.Emulator(ic, fc, dy.DyffusionConfig(horizon=6, inference_horizon=24, ensemble_size=4,
                                                     stochastic=False))
        forcing = dy.extend_forcing(val.stack("forcing"), val.manifest["period"], 25)
        traces = det.ensemble_rollout(val.stack("prognostic")[0], forcing, val.stack("invariant"))
        states = np.stack([t.states for t in traces]).astype(np.float64)
        spread = float(np.max(M.spread(states.reshape(4, -1, 16, 32), build_grid(16, 32))))
        ok = first and telescoping and spread == 0.0
        return ok, (f"j=0 step bit-exact: {first}; telescoping with constant forecaster bit-exact: {telescoping}; "
                    f"deterministic E=4 spread {spread}")

    check(acceptance, 4, "cold-sampling algebra", run)


# -- 5 ---------------------------------------------------------------------------
def test_criterion_05_metric_oracles(acceptance):
    def run():
        rng = np.random.default_rng(5)
        worst = 0.0
        for n_ens in (2, 3, 5, 8, 25, 100):
            for _ in range(20):
                x = rng.standard_normal((n_ens, 4, 6)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
                y = rng.standard_normal((4, 6))
                worst = max(worst, float(np.abs(M.crps_cells(x, y) - M.crps_sorted(x, y)).max()))

        cell_x, cell_y = np.array([[0.0], [2.0]]), np.array([1.0])
        per_cell = (M.crps_cells(cell_x, cell_y)[0] == 0.0
                    and np.var(cell_x, axis=0, ddof=1)[0] == 2.0
                    and cell_x.mean(axis=0)[0] == cell_y[0]
                    and np.abs(cell_x - cell_y).mean() == 1.0)
        grid = build_grid(4)
        x = np.broadcast_to(cell_x.reshape(2, 1, 1, 1), (2, 1) + grid.shape)
        y = np.ones((1,) + grid.shape)
        s = M.score_all(x, y, grid)
        tol = 4 * np.finfo(float).eps  # weights are normalized to mean one up to rounding
        weighted = (abs(s["crps"][0]) <= tol and abs(s["spread"][0] - math.sqrt(2)) <= tol
                    and abs(s["rmse_ens"][0]) <= tol and abs(s["rmse"][0] - 1) <= tol
                    and abs(s["mae"][0] - 1) <= tol and abs(s["bias"][0]) <= tol)

        x1 = rng.standard_normal((1, 3) + grid.shape)
        y1 = rng.standard_normal((3,) + grid.shape)
        e1 = np.array_equal(M.crps(x1, y1, grid), M.mae(x1, y1, grid))

        violations = 0
        for _ in range(1000):
            n_ens = int(rng.integers(1, 12))
            xs = rng.standard_normal((n_ens, 2) + grid.shape) * rng.uniform(0.1, 3)
            ys = rng.standard_normal((2,) + grid.shape)
            violations += int(np.any(M.rmse_ens(xs, ys, grid) > M.rmse(xs, ys, grid)))
        ok = worst < 1e-10 and per_cell and weighted and e1 and violations == 0
        return ok, (f"double sum vs sorted {worst:.1e} (<1e-10); E=2 hand case exact per cell: {per_cell}, "
                    f"area-weighted within {tol:.1e}: {weighted}; E=1 CRPS == MAE: {e1}; "
                    f"Jensen violations {violations}/1000")

    check(acceptance, 5, "metric oracle equivalence", run)


# -- 6 ---------------------------------------------------------------------------
def test_criterion_06_ssr_calibration(acceptance):
    def run():
        grid = build_grid(16)
        rng = np.random.default_rng(6)

        def trials(n_ens, correction):
            out = []
            for _ in range(200):
                x = rng.standard_normal((n_ens, 1) + grid.shape)
                y = rng.standard_normal((1,) + grid.shape)
                out.append(float(M.ssr(x, y, grid, correction=correction)[0]))
            return np.array(out)

        big = trials(100, True)
        small_c = trials(5, True)
        small_u = trials(5, False)
        gap = small_c.mean() - small_u.mean()
        stderr = math.sqrt(small_c.var(ddof=1) / 200 + small_u.var(ddof=1) / 200)
        ok = 0.9 <= big.mean() <= 1.1 and gap > 5 * stderr and 0.9 <= small_c.mean() <= 1.1
        return ok, (f"E=100 mean SSR {big.mean():.3f} in [0.9, 1.1]; E=5 corrected {small_c.mean():.3f} vs "
                    f"uncorrected {small_u.mean():.3f} (gap {gap:.3f} = {gap / stderr:.0f} standard errors)")

    check(acceptance, 6, "SSR calibration", run)


# -- end-to-end desk run -----------------------------------------------------------
def _stage(argv, label, timings):
    t0 = time.perf_counter()
    code = cli.main([str(a) for a in argv])
    timings[label] = time.perf_counter() - t0
    if code != 0:
        raise RuntimeError(f"{label} exited with code {code}")


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    keep = os.environ.get("SPHEMU_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def desk_data(desk_root):
    """The 11-member desk ensemble (default configuration)."""
    timings = {}
    if not (desk_root / "data" / "index.json").exists():
        _stage(["--out", desk_root, "generate-data"], "generate-data", timings)
    return desk_root / "data", timings


@pytest.fixture(scope="session")
def desk_run(desk_root, desk_data):
    """Train both stages, roll out E=8 for 640 steps and evaluate."""
    timings = dict(desk_data[1])
    root = ["--out", desk_root]
    cdir = desk_root / "checkpoints"
    for stage in ("interpolator", "forecaster"):
        if not (cdir / f"{stage}.ckpt").exists():
            _stage(root + ["train", "--stage", stage], f"train-{stage}", timings)
    if not (desk_root / "rollout" / "nfe_report.json").exists():
        _stage(root + ["rollout"], "rollout", timings)
    _stage(root + ["evaluate"], "evaluate", timings)
    return desk_root, timings


def _time_means(path, names, start, stop):
    return np.stack([M.time_mean(dataset_read(path / n).stack("prognostic")[start:stop].astype(np.float64))
                     for n in names])


def test_criterion_07_noise_floor(acceptance, desk_data):
    def run():
        ddir = desk_data[0]
        index = json.loads((ddir / "index.json").read_text())
        val_name = index["validation"][0]
        refs = [n for n in index["members"] if n != val_name]
        grid = dataset_read(ddir / val_name).grid
        ref_tm = _time_means(ddir, refs, 1, None)
        val_tm = _time_means(ddir, [val_name], 1, None)[0]
        nf = M.noise_floor(ref_tm, val_tm, grid, reference_ids=refs, validation_id=val_name)
        dup = M.noise_floor(np.stack([val_tm] * len(refs)), val_tm, grid)
        positive = bool(np.all(nf.mean > 0))
        below = bool(np.all(nf.ensemble_mean_rmse < nf.mean))
        zero = bool(np.all(dup.mean == 0.0))
        ok = len(index["members"]) == 11 and len(refs) == 10 and positive and below and zero
        return ok, (f"{len(refs)} reference members vs {val_name}: floor > 0 on all channels: {positive}; "
                    f"ensemble-mean score below member mean on all channels: {below}; duplicated members give 0: {zero}")

    check(acceptance, 7, "noise-floor pipeline", run)


@pytest.mark.slow
def test_criterion_08_end_to_end(acceptance, desk_run):
    def run():
        root, timings = desk_run
        index = json.loads((root / "data" / "index.json").read_text())
        report = json.loads((root / "eval" / "report.json").read_text())
        nfe = json.loads((root / "rollout" / "nfe_report.json").read_text())
        val = dataset_read(root / "data" / index["validation"][0])
        grid, names = val.grid, val.prognostic_names
        traces = [dy.RolloutTrace.load(root / "rollout" / f"member_{k:02d}") for k in range(8)]
        states = np.stack([t.states for t in traces])
        finite = bool(np.all(np.isfinite(states)))
        shape_ok = states.shape == (8, 640, 10, 32, 64)
        truth = M.time_mean(val.stack("prognostic")[1:641].astype(np.float64))
        clim = _time_means(root / "data", index["train"], 0, None).mean(axis=0)
        clim_rmse = M.rmse(clim[None], truth, grid)
        rmse = np.array([report["rows"][n]["rmse"] for n in names])
        rmse_ens = np.array([report["rows"][n]["rmse_ens"] for n in names])
        wins = int(np.sum(rmse < clim_rmse))
        jensen = bool(np.all(rmse_ens <= rmse))
        ckpts = [dy.ModelCheckpoint.load(root / "checkpoints" / f"{s}.ckpt") for s in ("interpolator", "forecaster")]
        train_s = sum(c.info["wallclock_seconds"] for c in ckpts)
        rollout_s = max(m["wallclock_seconds"] for m in nfe["members"])
        rollout_total = timings.get("rollout", sum(m["wallclock_seconds"] for m in nfe["members"]))
        n_windows = ckpts[0].info.get("train_windows")
        per_channel = ", ".join(f"{n} {r:.3g}/{c:.3g}" for n, r, c in zip(names, rmse, clim_rmse))
        ok = finite and shape_ok and wins >= 7 and jensen and train_s <= 7200 and rollout_total <= 300
        return ok, (f"E=8 x 640 steps finite: {finite}; beats climatology on {wins}/10 channels (need 7) "
                    f"[emulator/climatology time-mean RMSE: {per_channel}]; rmse_ens <= rmse on all channels: "
                    f"{jensen}; training {train_s / 60:.1f} min (<=120), rollout {rollout_total:.0f} s "
                    f"(<=300, slowest member {rollout_s:.0f} s); {n_windows} training windows")

    check(acceptance, 8, "end-to-end desk emulation", run)


@pytest.mark.slow
def test_criterion_09_variability(acceptance, desk_run):
    def run():
        root, _ = desk_run
        index = json.loads((root / "data" / "index.json").read_text())
        val = dataset_read(root / "data" / index["validation"][0])
        grid, names = val.grid, val.prognostic_names
        states = [dy.RolloutTrace.load(root / "rollout" / f"member_{k:02d}").states for k in range(8)]
        tm = np.stack([s.astype(np.float64).mean(axis=0) for s in states])
        refs = [n for n in index["members"] if n not in index["validation"]]
        ref_tm = _time_means(root / "data", refs, 1, 641)

        def oracle(x):
            n = x.shape[0]
            mean = sum(x[e] for e in range(n)) / n
            var = sum((x[e] - mean) ** 2 for e in range(n)) / (n - 1)
            w = grid.area_weights[:, None]
            return (np.sqrt(var) * w).sum(axis=(-2, -1)) / (grid.nlat * grid.nlon)

        rows = [line.split(",") for line in (root / "eval" / "variability.csv").read_text().splitlines()[1:]]
        emu = np.array([float(r[1]) for r in rows])
        ref = np.array([float(r[2]) for r in rows])
        err_e = float(np.max(np.abs(emu - oracle(tm))))
        err_r = float(np.max(np.abs(ref - oracle(ref_tm))))
        good = bool(np.all(np.isfinite(emu) & (emu > 0) & np.isfinite(ref) & (ref > 0)))
        ratio = ", ".join(f"{n} {e / r:.2f}" for n, e, r in zip(names, emu, ref))
        ok = good and err_e < 1e-10 and err_r < 1e-10 and [r[0] for r in rows] == names
        return ok, (f"finite and positive: {good}; oracle error emulator {err_e:.1e}, reference {err_r:.1e} "
                    f"(<1e-10); emulator/reference ratio: {ratio}")

    check(acceptance, 9, "variability methodology", run)


# -- 10 ---------------------------------------------------------------------------
DETERMINISM = {
    "grid": {"nlat": 16},
    "toy_climate": {"n_steps": 96, "spinup_steps": 16},
    "data": {"members": 4},
    "model": {"interpolator": {"embed_dim": 8, "num_layers": 2},
              "forecaster": {"embed_dim": 8, "num_layers": 2}},
    "training": {"epochs": 2, "max_steps_per_epoch": 6, "val_rollout_steps": 12, "val_ensemble": 2,
                 "val_windows": 4},
    "dyffusion": {"inference_horizon": 48, "ensemble_size": 4},
}


def test_criterion_10_determinism(acceptance, tmp_path):
    def run():
        cfg = tmp_path / "determinism.json"
        cfg.write_text(json.dumps(DETERMINISM))
        reports = []
        for k in range(2):
            root = tmp_path / f"run{k}"
            base = ["--config", cfg, "--out", root]
            for argv in (["generate-data"], ["train", "--stage", "interpolator"],
                         ["train", "--stage", "forecaster"], ["rollout"], ["evaluate"]):
                _stage(base + argv, argv[0], {})
            reports.append({p: (root / "eval" / p).read_bytes()
                            for p in ("report.json", "report.csv", "reference_report.json", "variability.csv")})
        same = all(reports[0][p] == reports[1][p] for p in reports[0])
        return same, f"reduced pipeline (16x32 grid, 4 members, E=4, 48 steps) run twice: reports bit-identical: {same}"

    check(acceptance, 10, "pipeline determinism", run)


# -- supporting measurement -------------------------------------------------------------
@pytest.mark.slow
def test_desk_training_improves_validation_score(desk_run):
    for stage in ("interpolator", "forecaster"):
        rows = (desk_run[0] / "checkpoints" / f"{stage}_training.csv").read_text().splitlines()
        header = rows[0].split(",")
        col = header.index("val_crps")
        scores = [float(r.split(",")[col]) for r in rows[1:] if r.split(",")[col] not in ("", "nan")]
        assert scores[-1] < scores[0], stage
