"""Ensemble verification scores and climate aggregations.

Ensembles are arrays ``(E, ..., I, J)`` and targets ``(..., I, J)``; every
score reduces the member axis and the grid, keeping the middle axes (usually
channels).  Grid means use area weights normalized so that their latitude
average is 1.

Scores that need at least two members return NaN for ``E = 1``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sphemu import kernels
from sphemu.errors import GridMismatchError, InvalidArgumentError
from sphemu.sphere import SphericalGrid, area_weighted_mean

METRICS = ("bias", "mae", "rmse", "rmse_ens", "spread", "ssr", "crps")
UNDEFINED = "undefined"


def _check(x, y, grid: SphericalGrid) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim < 3:
        raise InvalidArgumentError(f"ensemble must be (E, ..., I, J), got shape {x.shape}")
    if x.shape[-2:] != grid.shape or y.shape[-2:] != grid.shape:
        raise GridMismatchError(f"fields {x.shape} / {y.shape} do not live on grid {grid.shape}")
    if x.shape[1:] != y.shape:
        raise GridMismatchError(f"ensemble {x.shape} and target {y.shape} are not aligned")
    return x, y


def _wmean(f, grid):
    return area_weighted_mean(f, grid)


# -- time aggregation ---------------------------------------------------------
def time_mean(trace, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Mean over the leading (time) axis restricted to ``[start, stop)``."""
    trace = np.asarray(trace)
    stop = trace.shape[0] if stop is None else stop
    if not 0 <= start < stop <= trace.shape[0]:
        raise InvalidArgumentError(f"empty or invalid time range [{start}, {stop}) for {trace.shape[0]} steps")
    return np.asarray(trace[start:stop], dtype=np.float64).mean(axis=0)


def zonal_mean(f) -> np.ndarray:
    """Unweighted mean over longitude, one value per latitude."""
    return np.asarray(f, dtype=np.float64).mean(axis=-1)


# -- member-wise scores -------------------------------------------------------
def bias(x, y, grid: SphericalGrid) -> np.ndarray:
    x, y = _check(x, y, grid)
    return _wmean(x - y, grid).mean(axis=0)


def mae(x, y, grid: SphericalGrid) -> np.ndarray:
    x, y = _check(x, y, grid)
    return _wmean(np.abs(x - y), grid).mean(axis=0)


def rmse(x, y, grid: SphericalGrid) -> np.ndarray:
    """Mean over members of each member's root-mean-square error."""
    x, y = _check(x, y, grid)
    return np.sqrt(_wmean((x - y) ** 2, grid)).mean(axis=0)


# -- ensemble scores ----------------------------------------------------------
def rmse_ens(x, y, grid: SphericalGrid) -> np.ndarray:
    x, y = _check(x, y, grid)
    return np.sqrt(_wmean((x.mean(axis=0) - y) ** 2, grid))


def spread(x, grid: SphericalGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != grid.shape:
        raise GridMismatchError(f"ensemble {x.shape} does not live on grid {grid.shape}")
    if x.shape[0] < 2:
        return np.full(x.shape[1:-2], np.nan)
    return np.sqrt(_wmean(x.var(axis=0, ddof=1), grid))


def ssr(x, y, grid: SphericalGrid, correction: bool = True) -> np.ndarray:
    """Spread over ensemble-mean RMSE, times ``sqrt((E + 1) / E)`` unless disabled."""
    x, y = _check(x, y, grid)
    n_ens = x.shape[0]
    if n_ens < 2:
        return np.full(x.shape[1:-2], np.nan)
    factor = math.sqrt((n_ens + 1) / n_ens) if correction else 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        return factor * spread(x, grid) / rmse_ens(x, y, grid)


def crps_cells(x, y) -> np.ndarray:
    """Fair CRPS per cell from the literal double sum."""
    return kernels.crps_fair(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


def crps(x, y, grid: SphericalGrid) -> np.ndarray:
    """Area-weighted fair CRPS; equals the MAE when ``E = 1``."""
    x, y = _check(x, y, grid)
    return _wmean(crps_cells(x, y), grid)


def crps_sorted(x, y) -> np.ndarray:
    """Closed-form fair CRPS per cell from sorted members.

    ``sum_{e,f} |x_e - x_f| = 2 sum_k (2k - E + 1) x_(k)`` for ascending
    order statistics ``x_(0) <= ... <= x_(E-1)``.
    """
    x = np.sort(np.asarray(x, dtype=np.float64), axis=0)
    y = np.asarray(y, dtype=np.float64)
    n_ens = x.shape[0]
    skill = np.abs(x - y).mean(axis=0)
    if n_ens == 1:
        return skill
    k = np.arange(n_ens, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    pair_sum = 2.0 * np.sum((2.0 * k - n_ens + 1.0) * x, axis=0)
    return skill - pair_sum / (2.0 * n_ens * (n_ens - 1))


def score_all(x, y, grid: SphericalGrid) -> dict[str, np.ndarray]:
    return {
        "bias": bias(x, y, grid),
        "mae": mae(x, y, grid),
        "rmse": rmse(x, y, grid),
        "rmse_ens": rmse_ens(x, y, grid),
        "spread": spread(x, grid),
        "ssr": ssr(x, y, grid),
        "crps": crps(x, y, grid),
    }


# -- climate aggregations -----------------------------------------------------
@dataclass
class NoiseFloor:
    member_scores: np.ndarray  # (N, ...)
    mean: np.ndarray
    std: np.ndarray
    ensemble_mean_rmse: np.ndarray


def noise_floor(reference, validation, grid: SphericalGrid,
                reference_ids=None, validation_id=None) -> NoiseFloor:
    """Time-mean RMSE of each reference member against the validation member.

    ``reference`` is a sequence (or ``(N, ..., I, J)`` array) of time-means
    excluding the validation run.  Passing ids lets the function refuse a
    reference list that contains the validation member.
    """
    if validation_id is not None and reference_ids is not None and validation_id in list(reference_ids):
        raise InvalidArgumentError(f"validation member {validation_id!r} is part of the reference ensemble")
    if not isinstance(reference, np.ndarray):
        if any(r is validation for r in reference):
            raise InvalidArgumentError("validation array is part of the reference ensemble")
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape[0] < 2:
        raise InvalidArgumentError("the noise floor needs at least two reference members")
    ref, val = _check(ref, validation, grid)
    scores = np.sqrt(_wmean((ref - val) ** 2, grid))
    return NoiseFloor(
        member_scores=scores,
        mean=scores.mean(axis=0),
        std=scores.std(axis=0),
        ensemble_mean_rmse=rmse_ens(ref, val, grid),
    )


def variability(x, grid: SphericalGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell standard deviation (ddof 1) across members and its area-weighted mean."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != grid.shape:
        raise GridMismatchError(f"ensemble {x.shape} does not live on grid {grid.shape}")
    if x.shape[0] < 2:
        nan_map = np.full(x.shape[1:], np.nan)
        return np.full(x.shape[1:-2], np.nan), nan_map
    std_map = x.std(axis=0, ddof=1)
    return _wmean(std_map, grid), std_map


def weather_vs_climate(trace, validation_trace, grid: SphericalGrid, short_window: int,
                       full_range: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(mean step-wise RMSE over the first short_window steps, time-mean RMSE)``."""
    trace = np.asarray(trace, dtype=np.float64)
    val = np.asarray(validation_trace, dtype=np.float64)
    if trace.shape != val.shape:
        raise GridMismatchError(f"traces {trace.shape} and {val.shape} are not aligned")
    if short_window < 1 or short_window > trace.shape[0]:
        raise InvalidArgumentError(f"short window {short_window} exceeds trace length {trace.shape[0]}")
    start, stop = full_range if full_range is not None else (0, trace.shape[0])
    if not 0 <= start < stop <= trace.shape[0]:
        raise InvalidArgumentError(f"full range [{start}, {stop}) exceeds trace length {trace.shape[0]}")
    step_rmse = np.sqrt(_wmean((trace[:short_window] - val[:short_window]) ** 2, grid))
    short = step_rmse.mean(axis=0)
    tm = np.sqrt(_wmean((time_mean(trace, start, stop) - time_mean(val, start, stop)) ** 2, grid))
    return short, tm


# -- reports ------------------------------------------------------------------
def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else UNDEFINED


@dataclass
class EvalReport:
    """Per-variable metric table plus run metadata."""

    variables: list[str]
    rows: dict[str, dict[str, float]]
    metadata: dict = field(default_factory=dict)

    def value(self, variable: str, metric: str) -> float:
        return self.rows[variable][metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "metric", "value"])
        for var in self.variables:
            for metric, v in self.rows[var].items():
                w.writerow([var, metric, _fmt(v)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            _jsonable({"metadata": self.metadata, "variables": self.variables, "rows": self.rows}),
            indent=1,
            sort_keys=True,
        )

    def write(self, directory, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        json_path = directory / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        rows = {
            var: {m: (float("nan") if v is None else float(v)) for m, v in metrics.items()}
            for var, metrics in d["rows"].items()
        }
        return cls(d["variables"], rows, d["metadata"])


def build_report(x, y, grid: SphericalGrid, names, metadata: dict | None = None,
                 floor: NoiseFloor | None = None) -> EvalReport:
    """Score an ensemble of time-means ``(E, C, I, J)`` against ``(C, I, J)``.

    With a noise floor, relative excess over the floor is added in percent
    for both the member-wise and the ensemble-mean RMSE.
    """
    scores = score_all(x, y, grid)
    names = list(names)
    rows: dict[str, dict[str, float]] = {}
    for c, name in enumerate(names):
        row = {m: float(scores[m][c]) for m in METRICS}
        if floor is not None:
            fm, fe = float(floor.mean[c]), float(floor.ensemble_mean_rmse[c])
            row["floor_rmse"] = fm
            row["floor_rmse_ens"] = fe
            row["rmse_vs_floor_pct"] = 100.0 * (row["rmse"] - fm) / fm if fm > 0 else float("nan")
            row["rmse_ens_vs_floor_pct"] = 100.0 * (row["rmse_ens"] - fe) / fe if fe > 0 else float("nan")
        rows[name] = row
    meta = {"ensemble_size": int(np.shape(x)[0]), "grid": grid.to_dict()}
    meta.update(metadata or {})
    return EvalReport(names, rows, meta)


def write_map_f32(path, arr) -> Path:
    path = Path(path)
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)
    return path


def write_pgm(path, arr) -> Path:
    """8-bit binary PGM, min-max scaled; constant maps render mid-grey."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError("PGM export takes a single 2-D map")
    finite = np.isfinite(a)
    lo = a[finite].min() if finite.any() else 0.0
    hi = a[finite].max() if finite.any() else 0.0
    if hi > lo:
        img = np.round(255.0 * (a - lo) / (hi - lo))
    else:
        img = np.full(a.shape, 128.0)
    img = np.where(finite, img, 0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return path
