"""Command-line harness: data generation, training, rollout and evaluation.

Exit codes: 0 success, 2 I/O or usage, 3 missing prerequisite, 4 data
mismatch, 5 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from sphemu import config as cfgmod
from sphemu.errors import (
    CorruptDatasetError,
    DivergedSimulationError,
    GridMismatchError,
    InvalidArgumentError,
    InvalidDataError,
    InvalidStateError,
    UnsupportedVersionError,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_IO = 2
EXIT_PREREQUISITE = 3
EXIT_MISMATCH = 4
EXIT_DIVERGED = 5


class MissingPrerequisiteError(InvalidStateError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DivergedSimulationError):
        return EXIT_DIVERGED
    if isinstance(exc, (GridMismatchError, CorruptDatasetError, UnsupportedVersionError, InvalidDataError)):
        return EXIT_MISMATCH
    if isinstance(exc, InvalidStateError):
        return EXIT_PREREQUISITE
    if isinstance(exc, (OSError, InvalidArgumentError)):
        return EXIT_IO
    raise exc


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- layout -----------------------------------------------------------------------
def data_dir(root: Path) -> Path:
    return root / "data"


def checkpoint_dir(root: Path) -> Path:
    return root / "checkpoints"


def member_name(k: int) -> str:
    return f"member_{k:02d}"


def read_index(ddir: Path) -> dict:
    path = ddir / "index.json"
    if not path.exists():
        raise MissingPrerequisiteError(f"no dataset index at {path}; run generate-data first")
    return json.loads(path.read_text())


def load_members(ddir: Path, names):
    from sphemu.toy_climate import dataset_read

    return [dataset_read(ddir / n) for n in names]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"{what} not found at {path}")
    return path


# -- commands ------------------------------------------------------------------------
def cmd_generate_data(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu.toy_climate import dataset_write, make_ensemble, member_seeds

    n = args.members if args.members is not None else cfg.data.members
    seed = args.seed if args.seed is not None else cfg.seeds.data
    if n < 2:
        raise InvalidArgumentError("ensemble metrics require >= 2 reference members for the noise floor; use --members >= 2")
    n_val = cfg.data.validation_members
    if not 1 <= n_val < n:
        raise InvalidArgumentError(f"validation_members must be in [1, {n - 1}]")
    ddir = data_dir(root)
    ddir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    members = make_ensemble(cfg.toy_config(), n, seed, jobs=args.jobs)
    names = [member_name(k) for k in range(n)]
    for name, ds in zip(names, members):
        dataset_write(ds, ddir / name)
    index = {
        "schema_version": 1,
        "master_seed": seed,
        "member_seeds": member_seeds(seed, n),
        "members": names,
        "train": names[: n - n_val],
        "validation": names[n - n_val :],
    }
    (ddir / "index.json").write_text(json.dumps(index, indent=1))
    cfgmod.write_resolved(cfg, ddir, "generate-data", {"members": n, "seed": seed})
    _log(f"wrote {n} members to {ddir} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_train(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu import dyffusion as dy

    ddir = data_dir(root)
    cdir = checkpoint_dir(root)
    if args.stage == "forecaster":
        interp_path = _require(cdir / "interpolator.ckpt", "interpolator checkpoint (train --stage interpolator first)")
    index = read_index(ddir)
    train = load_members(ddir, index["train"])
    validation = load_members(ddir, index["validation"][:1])[0]
    tcfg = cfg.train_config()
    cdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(row):
        if args.verbose and row["step"] % 50 == 0:
            _log(f"step {row['step']} epoch {row['epoch']} loss {row['loss']:.5f}")

    if args.stage == "interpolator":
        ckpt, log = dy.train_interpolator(train, cfg.network_dict("interpolator"), cfg.dyffusion.horizon, tcfg,
                                          validation=validation, residual=cfg.model.residual, log_every=progress)
    else:
        interp = dy.ModelCheckpoint.load(interp_path)
        if interp.horizon != cfg.dyffusion.horizon:
            raise InvalidArgumentError(
                f"interpolator was trained with h={interp.horizon}, config asks for h={cfg.dyffusion.horizon}"
            )
        ckpt, log = dy.train_forecaster(train, interp, cfg.network_dict("forecaster"), tcfg, validation=validation,
                                        residual=cfg.model.residual, dyffusion=cfg.dyffusion_config(),
                                        log_every=progress)
    ckpt.info["wallclock_seconds"] = time.perf_counter() - t0
    ckpt.save(cdir / f"{args.stage}.ckpt")
    log.write_csv(cdir / f"{args.stage}_training.csv")
    cfgmod.write_resolved(cfg, cdir, f"train-{args.stage}", {"stage": args.stage})
    _log(f"{args.stage}: {ckpt.info['steps']} steps, best epoch {ckpt.info['best_epoch']}, "
         f"{ckpt.info['wallclock_seconds']:.0f} s")
    return EXIT_OK


def cmd_rollout(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu import dyffusion as dy

    cdir = Path(args.checkpoint_dir) if args.checkpoint_dir else checkpoint_dir(root)
    ip = _require(cdir / "interpolator.ckpt", "interpolator checkpoint")
    fp = _require(cdir / "forecaster.ckpt", "forecaster checkpoint")
    ddir = data_dir(root) if args.data_dir is None else Path(args.data_dir)
    index = read_index(ddir)
    initial = load_members(ddir, index["validation"][:1])[0]
    overrides = {"ensemble_size": args.ensemble, "inference_horizon": args.horizon, "seed": args.seed}
    if args.deterministic:
        overrides["stochastic"] = False
    dcfg = cfg.dyffusion_config(**overrides)
    if args.deterministic and dcfg.ensemble_size > 1:
        _log("warning: --deterministic makes every ensemble member identical")
    emu = dy.Emulator(dy.ModelCheckpoint.load(ip), dy.ModelCheckpoint.load(fp), dcfg)
    H, h = dcfg.inference_horizon, dcfg.horizon
    need = max(-(-H // h) * h, H + 1)
    forcing = dy.extend_forcing(initial.stack("forcing"), initial.manifest["period"], need)
    out = Path(args.out_dir) if args.out_dir else root / "rollout"
    out.mkdir(parents=True, exist_ok=True)
    results = emu.ensemble_rollout(initial.stack("prognostic")[0], forcing, initial.stack("invariant"),
                                   jobs=args.jobs)
    expected = dy.expected_nfe(h, H)
    report = {"horizon": h, "inference_horizon": H, "ensemble_size": len(results), "expected": expected,
              "initial_condition": index["validation"][0], "members": []}
    failures = []
    for m, res in enumerate(results):
        if isinstance(res, Exception):
            failures.append(res)
            report["members"].append({"member": m, "status": "diverged", "window": res.window, "message": str(res)})
            _log(f"member {m} diverged in window {res.window}")
            continue
        res.save(out / member_name(m))
        per_window = [n.total for n in res.nfe]
        report["members"].append({
            "member": m,
            "status": "ok",
            "nfe_total": sum(per_window),
            "nfe_per_window": per_window,
            "identity_holds": all(t == 3 * (h - 1) for t in per_window) and sum(per_window) == expected["total"],
            "wallclock_seconds": res.wallclock,
        })
    (out / "nfe_report.json").write_text(json.dumps(report, indent=1))
    cfgmod.write_resolved(cfg, out, "rollout", {k: v for k, v in vars(args).items() if k != "func"})
    if failures:
        raise failures[0]
    return EXIT_OK


def _load_traces(path: Path):
    """``(E, T, C, I, J)`` from a rollout directory, or a dataset as one member."""
    from sphemu import dyffusion as dy
    from sphemu.toy_climate import dataset_read

    if (path / "manifest.json").exists():
        m = json.loads((path / "manifest.json").read_text())
        if m.get("kind") == "rollout-trace":
            tr = dy.RolloutTrace.load(path)
            return tr.states[None], tr.names
        ds = dataset_read(path)
        return ds.stack("prognostic")[1:][None], ds.prognostic_names
    dirs = sorted(p for p in path.glob("member_*") if (p / "manifest.json").exists())
    if not dirs:
        raise MissingPrerequisiteError(f"no traces found under {path}")
    traces = [dy.RolloutTrace.load(d) for d in dirs]
    names = traces[0].names
    if any(t.names != names or t.states.shape != traces[0].states.shape for t in traces):
        raise GridMismatchError("traces in the ensemble are not aligned")
    return np.stack([t.states for t in traces]), names


def cmd_evaluate(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu import metrics
    from sphemu.toy_climate import dataset_read

    traces, names = _load_traces(Path(args.traces) if args.traces else root / "rollout")
    ref_dir = Path(args.reference_ensemble) if args.reference_ensemble else data_dir(root)
    index = read_index(ref_dir)
    val_path = Path(args.validation) if args.validation else ref_dir / index["validation"][0]
    val = dataset_read(val_path)
    grid = val.grid
    if list(names) != val.prognostic_names:
        raise GridMismatchError("trace channels differ from the validation dataset")
    if traces.shape[-2:] != grid.shape:
        raise GridMismatchError(f"traces on {traces.shape[-2:]} but validation on {grid.shape}")
    T = traces.shape[1]
    truth_all = val.stack("prognostic")
    if truth_all.shape[0] < T + 1:
        raise GridMismatchError(f"traces cover {T} steps but validation only {truth_all.shape[0] - 1}")
    truth = truth_all[1 : T + 1].astype(np.float64)
    ev = cfg.evaluation
    start, stop = ev.start, ev.stop if ev.stop is not None else T
    if not 0 <= start < stop <= T:
        raise GridMismatchError(f"evaluation range [{start}, {stop}) does not fit traces of {T} steps")
    x = traces.astype(np.float64)
    tm = np.stack([metrics.time_mean(x[e], start, stop) for e in range(x.shape[0])])
    y = metrics.time_mean(truth, start, stop)

    val_name = val_path.name
    ref_names = [n for n in index["members"] if n != val_name and n not in index["validation"]]
    floor = None
    ref_tm = None
    if len(ref_names) >= 2:
        refs = load_members(ref_dir, ref_names)
        for r in refs:
            if r.manifest["grid"] != val.manifest["grid"]:
                raise GridMismatchError("reference member on a different grid")
        ref_tm = np.stack([metrics.time_mean(r.stack("prognostic")[1 : T + 1].astype(np.float64), start, stop)
                           for r in refs])
        floor = metrics.noise_floor(ref_tm, y, grid, reference_ids=ref_names, validation_id=val_name)

    out = Path(args.out_dir) if args.out_dir else root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    meta = {"time_range": [start, stop], "trace_steps": T, "validation": val_name, "reference": ref_names}
    report = metrics.build_report(tm, y, grid, names, meta, floor)
    report.write(out, "report")
    if ref_tm is not None:
        metrics.build_report(ref_tm, y, grid, names, {**meta, "kind": "reference-ensemble"}).write(out, "reference_report")

    # maps and profiles
    maps = out / "maps"
    maps.mkdir(exist_ok=True)
    bias_map = tm.mean(axis=0) - y
    var_area, var_map = metrics.variability(tm, grid)
    for c, n in enumerate(names):
        metrics.write_map_f32(maps / f"bias_{n}.f32", bias_map[c])
        metrics.write_pgm(maps / f"bias_{n}.pgm", bias_map[c])
        if np.all(np.isfinite(var_map[c])):
            metrics.write_map_f32(maps / f"variability_{n}.f32", var_map[c])
            metrics.write_pgm(maps / f"variability_{n}.pgm", var_map[c])
    lat = grid.latitudes
    with open(out / "zonal_mean.csv", "w") as fh:
        fh.write("variable,latitude,emulator,reference\n")
        zm_e = metrics.zonal_mean(tm.mean(axis=0))
        zm_r = metrics.zonal_mean(y)
        for c, n in enumerate(names):
            for i in range(grid.nlat):
                fh.write(f"{n},{lat[i]!r},{zm_e[c, i]!r},{zm_r[c, i]!r}\n")
    ref_var = (metrics.variability(ref_tm, grid)[0] if ref_tm is not None else np.full(len(names), np.nan))
    with open(out / "variability.csv", "w") as fh:
        fh.write("variable,emulator,reference\n")
        for c, n in enumerate(names):
            fh.write(f"{n},{metrics._fmt(var_area[c])},{metrics._fmt(ref_var[c])}\n")
    short = min(cfg.evaluation.short_window, T)
    with open(out / "weather_vs_climate.csv", "w") as fh:
        fh.write("sample,variable,short_rmse,time_mean_rmse\n")
        for e in range(x.shape[0]):
            s, t = metrics.weather_vs_climate(x[e], truth, grid, short, (start, stop))
            for c, n in enumerate(names):
                fh.write(f"{e},{n},{s[c]!r},{t[c]!r}\n")
    cfgmod.write_resolved(cfg, out, "evaluate", {"traces": str(args.traces), "validation": val_name})
    _log(f"wrote evaluation report to {out}")
    return EXIT_OK


def cmd_nfe_report(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu import dyffusion as dy

    if args.rollout:
        path = Path(args.rollout) / "nfe_report.json"
        report = json.loads(_require(path, "rollout NFE report").read_text())
        ok = all(m.get("identity_holds") for m in report["members"] if m["status"] == "ok")
        print(json.dumps({"expected": report["expected"], "identity_holds": ok}, indent=1))
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    h = args.horizon or cfg.dyffusion.horizon
    H = args.inference_horizon or cfg.dyffusion.inference_horizon
    if h < 2 or H < h:
        raise InvalidArgumentError("need h >= 2 and H >= h")
    print(json.dumps(dy.expected_nfe(h, H), indent=1))
    return EXIT_OK


def cmd_selfcheck(args, cfg: cfgmod.RunConfig, root: Path) -> int:
    from sphemu import selfcheck

    results = selfcheck.run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK_FAILED


# -- entry point ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sphemu", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--out", help=f"output root (default: ${cfgmod.OUTPUT_ROOT_ENV} or ./{cfgmod.DEFAULT_OUTPUT_ROOT})")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="simulate the toy climate ensemble")
    g.add_argument("--members", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", choices=("interpolator", "forecaster"), required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="ensemble rollout from the validation initial state")
    r.add_argument("--checkpoint-dir")
    r.add_argument("--data-dir")
    r.add_argument("--out-dir")
    r.add_argument("--ensemble", type=int)
    r.add_argument("--horizon", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("evaluate", help="score traces against the validation run")
    e.add_argument("--traces")
    e.add_argument("--reference-ensemble")
    e.add_argument("--validation")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("nfe-report", help="expected or recorded network-evaluation counts")
    n.add_argument("--horizon", type=int)
    n.add_argument("--inference-horizon", type=int)
    n.add_argument("--rollout")
    n.set_defaults(func=cmd_nfe_report)

    s = sub.add_parser("selfcheck", help="run the fast invariant checks")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        root = cfg.output_root(args.out)
        return args.func(args, cfg, root)
    except Exception as exc:  # mapped to documented exit codes
        try:
            code = exit_code_for(exc)
        except Exception:
            raise exc from None
        _log(f"error: {exc}")
        return code


if __name__ == "__main__":
    sys.exit(main())
