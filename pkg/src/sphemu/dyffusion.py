"""Two-stage training and cold-sampling inference for windowed emulation.

The interpolator maps ``(x_t, x_{t+h}, f_t, i)`` to ``x_{t+i}`` and keeps its
dropout and drop-path active at inference.  The forecaster maps
``(x_{t+j}, f_{t+j}, j)`` to ``x_{t+h}``.  Sampling a window alternates
forecast refinement, interpolation and the cold-sampling correction::

    xh      = F(x[j], f[j], j)
    x~[j+1] = I(x[0], xh, f[0], j + 1 | xi)
    x[j+1]  = x~[j+1] + (x[j] - I(x[0], xh, f[0], j | xi'))

with ``I(., ., ., 0) = x[0]`` and the last iteration reduced to the forecast,
which costs ``3 (h - 1)`` network evaluations per window.

All network inputs and outputs are standardized per channel with
training-set statistics carried by the checkpoints.  Random streams are
keyed by ``(seed, member, window, role, j)`` so every member is reproducible
on its own.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from sphemu import autodiff as ad
from sphemu import metrics
from sphemu.errors import (
    CorruptDatasetError,
    DivergedSimulationError,
    GridMismatchError,
    InvalidArgumentError,
    InvalidStateError,
    UnsupportedVersionError,
)
from sphemu.optim import AdamW
from sphemu.sfno import SFNO, SfnoConfig
from sphemu.sphere import build_grid, get_sht

ROLE_XI = 1
ROLE_XI_PRIME = 2
STAGE_INTERPOLATOR = 11
STAGE_FORECASTER = 12
STAGE_SHUFFLE = 21
STAGE_VALIDATION = 31
STAGE_NOISE = 41
STAGE_PUSHFORWARD = 42
NOISE_MODES = ("independent", "shared")


# -- configuration --------------------------------------------------------------
@dataclass
class DyffusionConfig:
    horizon: int = 6
    inference_horizon: int = 640
    ensemble_size: int = 8
    noise_mode: str = "independent"
    seed: int = 0
    stochastic: bool = True
    use_ema: bool = False
    overwrite_channel: str | None = "T_s"
    overwrite_forcing: str | None = "SST"

    def __post_init__(self):
        if self.horizon < 2:
            raise InvalidArgumentError("horizon h must be >= 2")
        if self.inference_horizon < self.horizon:
            raise InvalidArgumentError("inference horizon H must be >= h")
        if self.ensemble_size < 1:
            raise InvalidArgumentError("ensemble size must be >= 1")
        if self.noise_mode not in NOISE_MODES:
            raise InvalidArgumentError(f"noise_mode must be one of {NOISE_MODES}")

    @property
    def n_windows(self) -> int:
        return -(-self.inference_horizon // self.horizon)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 4e-4
    weight_decay: float = 5e-3
    clip_norm: float = 0.5
    ema_decay: float = 0.9999
    window_stride: int = 3
    seed: int = 0
    max_steps_per_epoch: int | None = None
    early_stopping: bool = True
    val_rollout_steps: int = 40
    val_ensemble: int = 4
    val_windows: int = 16
    input_noise: float = 0.0
    pushforward: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.window_stride < 1:
            raise InvalidArgumentError("epochs, batch_size and window_stride must be positive")
        if self.input_noise < 0:
            raise InvalidArgumentError("input_noise must be >= 0")
        if not 0.0 <= self.pushforward <= 1.0:
            raise InvalidArgumentError("pushforward must be a probability")

    def to_dict(self) -> dict:
        return asdict(self)


# -- normalization ----------------------------------------------------------------
@dataclass
class Normalizer:
    """Per-channel standardization for prognostic, forcing and invariant channels."""

    prog_mean: np.ndarray
    prog_std: np.ndarray
    forcing_mean: np.ndarray
    forcing_std: np.ndarray
    inv_mean: np.ndarray
    inv_std: np.ndarray

    @staticmethod
    def _stats(arrays: Sequence[np.ndarray], axis_c: int) -> tuple[np.ndarray, np.ndarray]:
        # two passes in float64 over every array, channels kept
        n_c = arrays[0].shape[axis_c]
        total = np.zeros(n_c)
        count = 0
        for a in arrays:
            a = np.moveaxis(np.asarray(a, dtype=np.float64), axis_c, 0).reshape(n_c, -1)
            total += a.sum(axis=1)
            count += a.shape[1]
        mean = total / count
        sq = np.zeros(n_c)
        for a in arrays:
            a = np.moveaxis(np.asarray(a, dtype=np.float64), axis_c, 0).reshape(n_c, -1)
            sq += ((a - mean[:, None]) ** 2).sum(axis=1)
        std = np.sqrt(sq / count)
        std = np.where(std > 0, std, 1.0)
        return mean, std

    @classmethod
    def fit(cls, datasets) -> "Normalizer":
        pm, ps = cls._stats([d.stack("prognostic") for d in datasets], 1)
        fm, fs = cls._stats([datasets[0].stack("forcing")], 1)
        im, is_ = cls._stats([datasets[0].stack("invariant")], 0)
        return cls(pm, ps, fm, fs, im, is_)

    @staticmethod
    def _b(v, ndim, axis):
        shape = [1] * ndim
        shape[axis] = -1
        return v.reshape(shape)

    def norm_prog(self, x, axis: int = -3):
        x = np.asarray(x, dtype=np.float64)
        ax = axis % x.ndim
        return (x - self._b(self.prog_mean, x.ndim, ax)) / self._b(self.prog_std, x.ndim, ax)

    def denorm_prog(self, x, axis: int = -3):
        x = np.asarray(x, dtype=np.float64)
        ax = axis % x.ndim
        return x * self._b(self.prog_std, x.ndim, ax) + self._b(self.prog_mean, x.ndim, ax)

    def norm_forcing(self, f, axis: int = -3):
        f = np.asarray(f, dtype=np.float64)
        ax = axis % f.ndim
        return (f - self._b(self.forcing_mean, f.ndim, ax)) / self._b(self.forcing_std, f.ndim, ax)

    def norm_inv(self, v):
        v = np.asarray(v, dtype=np.float64)
        return (v - self.inv_mean[:, None, None]) / self.inv_std[:, None, None]

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def same_as(self, other: "Normalizer") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in asdict(self))


# -- checkpoints ------------------------------------------------------------------
CHECKPOINT_MAGIC = b"SPHCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    role: str  # "interpolator" or "forecaster"
    horizon: int
    sfno: SfnoConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    normalizer: Normalizer
    channels: dict[str, list[str]]
    residual: bool = True
    info: dict = field(default_factory=dict)
    output_scale: np.ndarray | None = None  # per-channel increment scale for residual heads

    def network(self, use_ema: bool = False) -> SFNO:
        return SFNO(self.sfno, params=self.ema if use_ema else self.params)

    def checksum(self) -> str:
        return params_checksum(self.params)

    def save(self, path) -> Path:
        path = Path(path)
        entries = []
        blobs = []
        offset = 0
        for group, arrays in (("params", self.params), ("ema", self.ema)):
            for name in sorted(arrays):
                a = np.ascontiguousarray(arrays[name], dtype="<f8")
                entries.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
                blobs.append(a.tobytes())
                offset += a.nbytes
        header = {
            "schema_version": CHECKPOINT_VERSION,
            "role": self.role,
            "horizon": self.horizon,
            "residual": self.residual,
            "output_scale": None if self.output_scale is None else np.asarray(self.output_scale).tolist(),
            "sfno": self.sfno.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "channels": self.channels,
            "info": metrics._jsonable(self.info),
            "tensors": entries,
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        tmp = path.with_name(path.name + ".tmp")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for b in blobs:
                fh.write(b)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CorruptDatasetError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        try:
            header = json.loads(raw[16 : 16 + hlen])
        except json.JSONDecodeError as exc:
            raise CorruptDatasetError(f"unreadable checkpoint header in {path}") from exc
        if header.get("schema_version") != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"checkpoint version {header.get('schema_version')!r} not supported")
        body = raw[16 + hlen :]
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "ema": {}}
        for e in header["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            start, stop = e["offset"], e["offset"] + 8 * n
            if stop > len(body):
                raise CorruptDatasetError(f"checkpoint payload truncated at {e['name']}", variable=e["name"])
            groups[e["group"]][e["name"]] = np.frombuffer(body[start:stop], dtype="<f8").reshape(e["shape"]).copy()
        return cls(
            role=header["role"],
            horizon=header["horizon"],
            sfno=SfnoConfig(**header["sfno"]),
            params=groups["params"],
            ema=groups["ema"],
            normalizer=Normalizer.from_dict(header["normalizer"]),
            channels=header["channels"],
            residual=header["residual"],
            info=header["info"],
            output_scale=None if header.get("output_scale") is None else np.asarray(header["output_scale"], dtype=np.float64),
        )


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


# -- network wrappers ---------------------------------------------------------------
def _batch_inv(inv: np.ndarray, nb: int) -> np.ndarray:
    return np.broadcast_to(inv, (nb,) + inv.shape)


def _scaled(out: ad.Tensor, scale) -> ad.Tensor:
    if scale is None:
        return out
    return ad.mul(out, np.asarray(scale, dtype=np.float64)[None, :, None, None])


def interpolator_forward(net: SFNO, x0, xh, f0, inv, i, rngs=None, stochastic: bool = False,
                         residual: bool = True, scale=None) -> ad.Tensor:
    """Batched ``I(x_t, x_{t+h}, f_t, i)`` in normalized space, ``(B, C, I, J)``.

    With ``residual`` the network predicts a correction to the straight line
    between the two endpoints (``net.config.max_time`` is the horizon ``h``),
    multiplied per channel by ``scale`` when given.
    """
    x0 = np.asarray(x0)
    xh = np.asarray(xh)
    nb = x0.shape[0]
    out = net([x0, xh, f0, _batch_inv(inv, nb)], i, rngs=rngs, stochastic=stochastic)
    if not residual:
        return out
    frac = np.broadcast_to(np.asarray(i, dtype=np.float64), (nb,)) / net.config.max_time
    return ad.add(_scaled(out, scale), x0 + frac.astype(x0.dtype)[:, None, None, None] * (xh - x0))


def forecaster_forward(net: SFNO, xj, fj, inv, j, residual: bool = True, scale=None) -> ad.Tensor:
    xj = np.asarray(xj)
    nb = xj.shape[0]
    out = net([xj, fj, _batch_inv(inv, nb)], j)
    return ad.add(_scaled(out, scale), xj) if residual else out


# -- training data --------------------------------------------------------------------
class WindowData:
    """Normalized training windows ``x_t .. x_{t+h}`` from a list of members."""

    def __init__(self, datasets, normalizer: Normalizer, horizon: int, stride: int = 1):
        if not datasets:
            raise InvalidArgumentError("no training datasets")
        grid = datasets[0].manifest["grid"]
        forcing = datasets[0].stack("forcing")
        for d in datasets[1:]:
            if d.manifest["grid"] != grid:
                raise GridMismatchError("training members live on different grids")
            if d.prognostic_names != datasets[0].prognostic_names:
                raise GridMismatchError("training members have different channels")
        self.horizon = horizon
        self.normalizer = normalizer
        self.prog = [normalizer.norm_prog(d.stack("prognostic")).astype(np.float32) for d in datasets]
        self.forcing = normalizer.norm_forcing(forcing).astype(np.float32)
        self.inv = normalizer.norm_inv(datasets[0].stack("invariant"))
        n_t = self.prog[0].shape[0]
        if n_t < horizon + 1:
            raise InvalidArgumentError(f"trajectories of {n_t} steps are shorter than a window (h + 1 = {horizon + 1})")
        self.index = [(m, t) for m in range(len(self.prog)) for t in range(0, self.prog[m].shape[0] - horizon, stride)]

    def __len__(self) -> int:
        return len(self.index)

    def states(self, rows, offset) -> np.ndarray:
        offset = np.broadcast_to(np.asarray(offset), (len(rows),))
        return np.stack([self.prog[m][t + o] for (m, t), o in zip(rows, offset)]).astype(np.float64)

    def forcings(self, rows, offset) -> np.ndarray:
        offset = np.broadcast_to(np.asarray(offset), (len(rows),))
        return np.stack([self.forcing[t + o] for (m, t), o in zip(rows, offset)]).astype(np.float64)

    def tendency_scale(self) -> np.ndarray:
        """Per-channel RMS of the ``h``-step change over every start time, floored at 1e-6."""
        h = self.horizon
        sq = np.zeros(self.prog[0].shape[1])
        count = 0
        for x in self.prog:
            for t in range(x.shape[0] - h):
                d = x[t + h].astype(np.float64) - x[t]
                sq += (d * d).sum(axis=(-2, -1))
                count += d[0].size
        return np.maximum(np.sqrt(sq / count), 1e-6)


def noise_scales(max_sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample noise levels, log-uniform over two decades up to ``max_sigma``."""
    return max_sigma * 10.0 ** rng.uniform(-2.0, 0.0, size=n)


def large_scale_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Random maps with equal variance in each degree ``1..nlat // 4``,
    scaled to unit area-weighted variance per map."""
    nlat, nlon = shape[-2:]
    lmax = max(nlat // 4, 1)
    sht = get_sht(nlat, nlon, lmax)
    lead = tuple(shape[:-2])
    c = rng.standard_normal(lead + (lmax + 1, lmax + 1)) + 1j * rng.standard_normal(lead + (lmax + 1, lmax + 1))
    c[..., 0].imag = 0.0
    c[..., 0] *= np.sqrt(2.0)
    deg = np.arange(lmax + 1)
    c *= sht.mask() / np.sqrt(2 * deg + 1.0)[:, None]
    c[..., 0, :] = 0.0
    f = sht.synthesis(c)
    w = sht.grid.area_weights[:, None]
    return f / np.sqrt((f * f * w).mean(axis=(-2, -1), keepdims=True))


def perturb_inputs(x: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """Add white noise, a channel-wise constant offset and a large-scale random
    map, each with std ``sigma`` (a scalar or one level per sample).

    Training on perturbed inputs against clean targets makes the learned step
    pull stray states back toward the data, which keeps long rollouts bounded.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.any(sigma):
        return x
    sigma = np.broadcast_to(sigma, x.shape[:1])[:, None, None, None]
    offset = rng.standard_normal(x.shape[:2])[:, :, None, None]
    return x + sigma * (rng.standard_normal(x.shape) + offset + large_scale_noise(x.shape, rng))


def _batches(n: int, batch_size: int, rng: np.random.Generator, limit: int | None):
    order = rng.permutation(n)
    out = [order[k : k + batch_size] for k in range(0, n, batch_size)]
    return out[:limit] if limit else out


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        cols = ["step", "epoch", "loss", "lr", "grad_norm", "skipped", "val_crps"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow(["" if r.get(c) is None else r[c] for c in cols])
        return path

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], []).append(r["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def val_scores(self) -> list[float]:
        return [r["val_crps"] for r in self.rows if r.get("val_crps") is not None]


def _model_config(base: SfnoConfig | dict, in_channels: int, out_channels: int, nlat: int, nlon: int,
                  max_time: int, stochastic: bool) -> SfnoConfig:
    d = base.to_dict() if isinstance(base, SfnoConfig) else dict(base)
    d.update(in_channels=in_channels, out_channels=out_channels, nlat=nlat, nlon=nlon, max_time=max_time)
    if not stochastic:
        d["mlp_dropout_rate"] = 0.0
        d["drop_path_rate"] = 0.0
    return SfnoConfig(**d)


def _channels(ds) -> dict[str, list[str]]:
    return {"prognostic": ds.prognostic_names, "forcing": ds.forcing_names, "invariant": ds.invariant_names}


def _train_loop(net: SFNO, data: WindowData, tcfg: TrainConfig, stage: int, loss_fn: Callable,
                validate: Callable | None, log_every: Callable | None = None):
    steps_per_epoch = len(_batches(len(data), tcfg.batch_size, np.random.default_rng(0), tcfg.max_steps_per_epoch))
    opt = AdamW(net.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm,
                ema_decay=tcfg.ema_decay, total_steps=tcfg.epochs * steps_per_epoch)
    log = TrainingLog()
    best = (math.inf, None, None, -1)
    step = 0
    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng([tcfg.seed, STAGE_SHUFFLE, stage, epoch])
        for batch in _batches(len(data), tcfg.batch_size, rng, tcfg.max_steps_per_epoch):
            rows = [data.index[k] for k in batch]
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = loss_fn(rows, step)
            tape.backward(loss)
            info = opt.step()
            log.rows.append({"step": step, "epoch": epoch, "loss": float(loss.data), "lr": info.lr,
                             "grad_norm": info.grad_norm, "skipped": int(info.skipped), "val_crps": None})
            if log_every is not None:
                log_every(log.rows[-1])
            step += 1
        if validate is not None:
            score = float(validate(net))
            log.rows[-1]["val_crps"] = score
            if score < best[0] or not tcfg.early_stopping:
                best = (score, net.state_dict(), opt.ema_params(), epoch)
    if best[1] is not None and tcfg.early_stopping:
        net.load_state_dict(best[1])
        ema = best[2]
    else:
        ema = opt.ema_params()
    info = {"steps": step, "epochs": tcfg.epochs, "best_epoch": best[3], "best_val_crps": best[0],
            "skipped_steps": opt.state.skipped_steps, "train_windows": len(data.index)}
    return net.state_dict(), ema, log, info


def train_interpolator(datasets, model: SfnoConfig | dict, horizon: int = 6, train: TrainConfig | None = None,
                       validation=None, normalizer: Normalizer | None = None, residual: bool = True,
                       log_every: Callable | None = None) -> tuple[ModelCheckpoint, TrainingLog]:
    """Fit ``I(x_t, x_{t+h}, f_t, i) ~ x_{t+i}`` on relative L2 with dropout active."""
    if horizon < 2:
        raise InvalidArgumentError("horizon h must be >= 2 to have interior steps to interpolate")
    tcfg = train or TrainConfig()
    norm = normalizer or Normalizer.fit(datasets)
    data = WindowData(datasets, norm, horizon, tcfg.window_stride)
    c = len(datasets[0].prognostic_names)
    nf = len(datasets[0].forcing_names)
    nv = len(datasets[0].invariant_names)
    g = datasets[0].grid
    cfg = _model_config(model, 2 * c + nf + nv, c, g.nlat, g.nlon, horizon, stochastic=True)
    net = SFNO(cfg, seed=tcfg.seed)
    scale = data.tendency_scale() if residual else None

    def loss_fn(rows, step):
        nb = len(rows)
        rng = np.random.default_rng([tcfg.seed, STAGE_INTERPOLATOR, step])
        i = rng.integers(1, horizon, size=nb)
        rngs = [np.random.default_rng([tcfg.seed, STAGE_INTERPOLATOR, step, b]) for b in range(nb)]
        noise = np.random.default_rng([tcfg.seed, STAGE_NOISE, STAGE_INTERPOLATOR, step])
        sigma = noise_scales(tcfg.input_noise, nb, noise)
        x0 = perturb_inputs(data.states(rows, 0), sigma, noise)
        xh = perturb_inputs(data.states(rows, horizon), sigma, noise)
        pred = interpolator_forward(net, x0, xh, data.forcings(rows, 0),
                                    data.inv, i, rngs=rngs, stochastic=True, residual=residual, scale=scale)
        return ad.relative_l2_loss(pred, data.states(rows, i))

    validate = None
    if validation is not None:
        vdata = WindowData([validation], norm, horizon, max(1, (validation.n_times - horizon) // max(tcfg.val_windows, 1)))
        rows = vdata.index[: tcfg.val_windows]

        def validate(net_):
            return interpolation_crps(net_, vdata, rows, horizon, tcfg.val_ensemble, tcfg.seed, residual, scale)

    params, ema, log, info = _train_loop(net, data, tcfg, STAGE_INTERPOLATOR, loss_fn, validate, log_every)
    info.update(train=tcfg.to_dict())
    ckpt = ModelCheckpoint("interpolator", horizon, cfg, params, ema, norm, _channels(datasets[0]), residual, info,
                           scale)
    return ckpt, log


def interpolation_crps(net: SFNO, data: WindowData, rows, horizon: int, n_ens: int, seed: int,
                       residual: bool = True, scale=None) -> float:
    """Mean fair CRPS (normalized units) of stochastic interpolations over ``i = 1..h-1``."""
    grid = build_grid(net.config.nlat, net.config.nlon)
    x0 = data.states(rows, 0)
    xh = data.states(rows, horizon)
    f0 = data.forcings(rows, 0)
    scores = []
    for i in range(1, horizon):
        members = []
        for e in range(n_ens):
            rngs = [np.random.default_rng([seed, STAGE_VALIDATION, i, e, b]) for b in range(len(rows))]
            members.append(interpolator_forward(net, x0, xh, f0, data.inv, i, rngs=rngs, stochastic=True,
                                                residual=residual, scale=scale).data)
        scores.append(metrics.crps(np.stack(members), data.states(rows, i), grid).mean())
    return float(np.mean(scores))


def forecaster_inputs(interp_net: SFNO, data: WindowData, rows, j, rngs, residual: bool = True,
                      scale=None, x0=None) -> np.ndarray:
    """``x^_{t+j}`` for forecaster training: ``x_t`` itself where ``j = 0``,
    otherwise a stochastic interpolation between ``x_t`` and ``x_{t+h}``.
    ``x0`` replaces the true ``x_t`` when given."""
    j = np.asarray(j)
    x0 = data.states(rows, 0) if x0 is None else np.asarray(x0)
    xj = x0.copy()
    live = np.flatnonzero(j > 0)
    if live.size:
        sub = [rows[k] for k in live]
        xj[live] = interpolator_forward(
            interp_net, x0[live], data.states(sub, data.horizon), data.forcings(sub, 0), data.inv, j[live],
            rngs=[rngs[k] for k in live], stochastic=True, residual=residual, scale=scale,
        ).data
    return xj


def pushforward_starts(net: SFNO, data: WindowData, rows, prob: float, residual: bool, scale,
                       rng: np.random.Generator) -> np.ndarray:
    """Window starts for forecaster training.  With probability ``prob`` a row
    whose previous window exists starts from the network's own ``j = 0``
    forecast of it (no gradient) instead of the true ``x_t``."""
    x0 = data.states(rows, 0)
    h = data.horizon
    pick = [k for k, (m, t) in enumerate(rows) if t >= h and rng.random() < prob]
    if pick:
        prev = [(rows[k][0], rows[k][1] - h) for k in pick]
        with ad.no_grad():
            x0[pick] = forecaster_forward(net, data.states(prev, 0), data.forcings(prev, 0), data.inv, 0,
                                          residual=residual, scale=scale).data
    return x0


def train_forecaster(datasets, interpolator: ModelCheckpoint | None, model: SfnoConfig | dict,
                     train: TrainConfig | None = None, validation=None, residual: bool = True,
                     dyffusion: DyffusionConfig | None = None,
                     log_every: Callable | None = None) -> tuple[ModelCheckpoint, TrainingLog]:
    """Fit ``F(x^_{t+j}, f_{t+j}, j) ~ x_{t+h}`` on L1 with a frozen stochastic interpolator."""
    if interpolator is None:
        raise InvalidStateError("forecaster training needs a trained interpolator checkpoint")
    if interpolator.role != "interpolator":
        raise InvalidStateError(f"checkpoint role is {interpolator.role!r}, expected 'interpolator'")
    tcfg = train or TrainConfig()
    horizon = interpolator.horizon
    norm = interpolator.normalizer
    data = WindowData(datasets, norm, horizon, tcfg.window_stride)
    c = len(datasets[0].prognostic_names)
    nf = len(datasets[0].forcing_names)
    nv = len(datasets[0].invariant_names)
    g = datasets[0].grid
    cfg = _model_config(model, c + nf + nv, c, g.nlat, g.nlon, horizon - 1, stochastic=False)
    net = SFNO(cfg, seed=tcfg.seed + 1)
    scale = data.tendency_scale() if residual else None
    interp_net = interpolator.network()
    for p in interp_net.params.values():
        p.requires_grad = False
    before = params_checksum(interp_net.state_dict())

    def loss_fn(rows, step):
        nb = len(rows)
        rng = np.random.default_rng([tcfg.seed, STAGE_FORECASTER, step])
        j = rng.integers(0, horizon, size=nb)
        rngs = [np.random.default_rng([tcfg.seed, STAGE_FORECASTER, step, b]) for b in range(nb)]
        x0 = pushforward_starts(net, data, rows, tcfg.pushforward, residual, scale,
                                np.random.default_rng([tcfg.seed, STAGE_PUSHFORWARD, step]))
        xj = forecaster_inputs(interp_net, data, rows, j, rngs, interpolator.residual, interpolator.output_scale, x0)
        noise = np.random.default_rng([tcfg.seed, STAGE_NOISE, STAGE_FORECASTER, step])
        xj = perturb_inputs(xj, noise_scales(tcfg.input_noise, nb, noise), noise)
        pred = forecaster_forward(net, xj, data.forcings(rows, j), data.inv, j, residual=residual, scale=scale)
        return ad.l1_loss(pred, data.states(rows, horizon))

    validate = None
    if validation is not None:
        dcfg = dyffusion or DyffusionConfig(horizon=horizon, inference_horizon=max(tcfg.val_rollout_steps, horizon))
        vcfg = DyffusionConfig(**{**dcfg.to_dict(), "horizon": horizon,
                                  "inference_horizon": max(tcfg.val_rollout_steps, horizon),
                                  "ensemble_size": tcfg.val_ensemble, "seed": tcfg.seed + 7919})

        def validate(net_):
            tmp = ModelCheckpoint("forecaster", horizon, cfg, net_.state_dict(), net_.state_dict(), norm,
                                  _channels(datasets[0]), residual, output_scale=scale)
            emu = Emulator(interpolator, tmp, vcfg)
            return emu.validation_crps(validation)

    params, ema, log, info = _train_loop(net, data, tcfg, STAGE_FORECASTER, loss_fn, validate, log_every)
    after = params_checksum(interp_net.state_dict())
    if before != after:
        raise InvalidStateError("interpolator parameters changed during forecaster training")
    info.update(train=tcfg.to_dict(), interpolator_checksum=before)
    ckpt = ModelCheckpoint("forecaster", horizon, cfg, params, ema, norm, _channels(datasets[0]), residual, info,
                           scale)
    return ckpt, log


# -- inference ----------------------------------------------------------------------
@dataclass
class NfeCount:
    forecaster: int = 0
    interpolator: int = 0

    @property
    def total(self) -> int:
        return self.forecaster + self.interpolator


@dataclass
class RolloutTrace:
    """Predicted states ``x^_1 .. x^_H`` (physical units, float32) and bookkeeping."""

    states: np.ndarray  # (H, C, I, J)
    names: list[str]
    nfe: list[NfeCount]
    streams: list[list[int]]
    member: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    wallclock: float = 0.0

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def nfe_table(self) -> list[dict]:
        return [{"window": w, "forecaster": n.forecaster, "interpolator": n.interpolator, "total": n.total}
                for w, n in enumerate(self.nfe)]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c, name in enumerate(self.names):
            np.ascontiguousarray(self.states[:, c], dtype="<f4").tofile(directory / f"{name}.f32")
        manifest = {
            "schema_version": 1,
            "kind": "rollout-trace",
            "member": self.member,
            "seed": self.seed,
            "config": self.config,
            "variables": [{"name": n, "file": f"{n}.f32", "dtype": "<f4",
                           "shape": [self.states.shape[0], self.states.shape[2], self.states.shape[3]]}
                          for n in self.names],
            "nfe": self.nfe_table(),
            "rng_streams": self.streams,
            "wallclock_seconds": self.wallclock,
        }
        (directory / "manifest.json").write_text(json.dumps(metrics._jsonable(manifest), indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "RolloutTrace":
        directory = Path(directory)
        try:
            m = json.loads((directory / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise CorruptDatasetError(f"no trace manifest in {directory}") from exc
        if m.get("schema_version") != 1 or m.get("kind") != "rollout-trace":
            raise UnsupportedVersionError(f"{directory} is not a supported rollout trace")
        arrays = []
        for v in m["variables"]:
            raw = (directory / v["file"]).read_bytes()
            if len(raw) != 4 * int(np.prod(v["shape"])):
                raise CorruptDatasetError(f"trace payload {v['name']} has the wrong length", variable=v["name"])
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(v["shape"]))
        states = np.stack(arrays, axis=1).astype(np.float32)
        nfe = [NfeCount(r["forecaster"], r["interpolator"]) for r in m["nfe"]]
        return cls(states, [v["name"] for v in m["variables"]], nfe, m["rng_streams"], m["member"], m["seed"],
                   m["config"], m.get("wallclock_seconds", 0.0))


@dataclass
class WindowResult:
    states: np.ndarray  # (h, C, I, J) normalized: x^_{t+1} .. x^_{t+h}
    nfe: NfeCount
    interpolated: list[np.ndarray] = field(default_factory=list)  # x~_{t+1} .. x~_{t+h-1}
    corrections: list[np.ndarray] = field(default_factory=list)
    forecasts: list[np.ndarray] = field(default_factory=list)


def _check_finite(x, window, member):
    if not np.all(np.isfinite(x)):
        raise DivergedSimulationError(
            f"non-finite state in window {window} of member {member}", window=window, member=member
        )


def cold_sample(x_t, forcings, forecast: Callable, interpolate: Callable, horizon: int,
                stream: Callable | None = None, noise_mode: str = "independent",
                overwrite: Callable | None = None, keep: bool = False,
                window: int = 0, member: int = 0) -> WindowResult:
    """One window of cold sampling with arbitrary forecaster and interpolator.

    ``forecast(x_j, f_j, j)`` and ``interpolate(x_t, x_h, f_t, i, rng)`` act on
    single states; ``stream(role, j)`` hands out the generator for the
    interpolator call of the given role at iteration ``j``.
    """
    h = horizon
    if h < 2:
        raise InvalidArgumentError("horizon h must be >= 2")
    if noise_mode not in NOISE_MODES:
        raise InvalidArgumentError(f"noise_mode must be one of {NOISE_MODES}")
    if len(forcings) < h:
        raise InvalidArgumentError(f"window needs {h} forcing steps, got {len(forcings)}")
    stream = stream or (lambda role, j: None)
    shared = noise_mode == "shared"
    nfe = NfeCount()
    res = WindowResult(np.empty((h,) + np.shape(x_t)), nfe)
    x0 = x_t
    xj = x_t
    for j in range(h):
        xh = forecast(xj, forcings[j], j)
        nfe.forecaster += 1
        _check_finite(xh, window, member)
        if keep:
            res.forecasts.append(xh)
        if j == h - 1:
            break
        x_tilde = interpolate(x0, xh, forcings[0], j + 1, stream(ROLE_XI, j))
        nfe.interpolator += 1
        if j == 0:
            # I(., ., ., 0) is x^_t itself: the correction vanishes without a network call
            correction = xj - x0
        else:
            i_j = interpolate(x0, xh, forcings[0], j, stream(ROLE_XI if shared else ROLE_XI_PRIME, j))
            nfe.interpolator += 1
            correction = xj - i_j
        x_next = x_tilde + correction
        if overwrite is not None:
            x_next = overwrite(x_next, j + 1)
        _check_finite(x_next, window, member)
        if keep:
            res.interpolated.append(x_tilde)
            res.corrections.append(correction)
        res.states[j] = x_next
        xj = x_next
    if overwrite is not None:
        xh = overwrite(xh, h)
    res.states[h - 1] = xh
    return res


class Emulator:
    """A trained interpolator/forecaster pair ready for sampling."""

    def __init__(self, interpolator: ModelCheckpoint, forecaster: ModelCheckpoint,
                 config: DyffusionConfig | None = None):
        if interpolator.role != "interpolator" or forecaster.role != "forecaster":
            raise InvalidStateError("need an interpolator and a forecaster checkpoint")
        if interpolator.horizon != forecaster.horizon:
            raise InvalidArgumentError("interpolator and forecaster were trained with different horizons")
        if not interpolator.normalizer.same_as(forecaster.normalizer):
            raise InvalidArgumentError("interpolator and forecaster use different normalization statistics")
        self.config = config or DyffusionConfig(horizon=interpolator.horizon)
        if self.config.horizon != interpolator.horizon:
            raise InvalidArgumentError(
                f"configured horizon {self.config.horizon} differs from the trained horizon {interpolator.horizon}"
            )
        self.interp_ckpt = interpolator
        self.fore_ckpt = forecaster
        self.interp = interpolator.network(self.config.use_ema)
        self.fore = forecaster.network(self.config.use_ema)
        self.norm = interpolator.normalizer
        self.channels = interpolator.channels
        self.names = list(self.channels["prognostic"])

    # single-member calls: arrays (C, I, J)
    def _interpolate(self, x0, xh, f0, inv, i, rng):
        stochastic = self.config.stochastic
        rngs = [rng] if rng is not None else None
        out = interpolator_forward(self.interp, x0[None], xh[None], f0[None], inv, i, rngs=rngs,
                                   stochastic=stochastic, residual=self.interp_ckpt.residual,
                                   scale=self.interp_ckpt.output_scale)
        return out.data[0]

    def _forecast(self, xj, fj, inv, j):
        return forecaster_forward(self.fore, xj[None], fj[None], inv, j, residual=self.fore_ckpt.residual,
                                  scale=self.fore_ckpt.output_scale).data[0]

    def stream(self, member: int, window: int, role: int, j: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, member, window, role, j])

    def sample_window(self, x_t, forcings, inv, member: int = 0, window: int = 0,
                      overwrite: Callable | None = None, keep: bool = False) -> WindowResult:
        """Cold-sample ``x^_{t+1..t+h}`` from ``x^_t`` (normalized arrays).

        ``forcings`` holds the normalized ``f_t .. f_{t+h-1}``; ``overwrite(x, j)``
        may rewrite the prescribed surface of the state at offset ``j``.
        """
        return cold_sample(
            x_t,
            forcings,
            forecast=lambda xj, fj, j: self._forecast(xj, fj, inv, j),
            interpolate=lambda x0, xh, f0, i, rng: self._interpolate(x0, xh, f0, inv, i, rng),
            horizon=self.config.horizon,
            stream=lambda role, j: self.stream(member, window, role, j),
            noise_mode=self.config.noise_mode,
            overwrite=overwrite,
            keep=keep,
            window=window,
            member=member,
        )

    # -- prescribed surface ------------------------------------------------
    def _overwrite_info(self, inv_phys):
        cfg = self.config
        if cfg.overwrite_channel is None or cfg.overwrite_forcing is None:
            return None
        if cfg.overwrite_channel not in self.names or cfg.overwrite_forcing not in self.channels["forcing"]:
            return None
        c = self.names.index(cfg.overwrite_channel)
        k = self.channels["forcing"].index(cfg.overwrite_forcing)
        mask = np.asarray(inv_phys[self.channels["invariant"].index("f_l")]) < 0.5
        return c, k, mask

    def rollout(self, x0, forcings, invariants, member: int = 0, horizon: int | None = None) -> RolloutTrace:
        """Autoregressive windows from physical ``x0`` ``(C, I, J)``.

        ``forcings`` are physical ``(N, F, I, J)`` for absolute steps 0..N-1.
        They must cover every network input (``ceil(H/h) h`` steps) and every
        kept output step (``H + 1``).
        """
        t_start = time.perf_counter()
        cfg = self.config
        h = cfg.horizon
        H = horizon or cfg.inference_horizon
        if H < h:
            raise InvalidArgumentError("inference horizon H must be >= h")
        n_win = -(-H // h)
        need = max(n_win * h, H + 1)
        forcings = np.asarray(forcings)
        if forcings.shape[0] < need:
            raise InvalidArgumentError(
                f"forcings cover {forcings.shape[0]} steps but {need} are needed for H={H}, h={h}"
            )
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape[0] != len(self.names) or x0.shape[1:] != (self.interp.config.nlat, self.interp.config.nlon):
            raise GridMismatchError(f"initial state {x0.shape} does not match the trained model")
        fn = self.norm.norm_forcing(forcings[: min(forcings.shape[0], n_win * h + 1)], axis=1)
        inv = self.norm.norm_inv(invariants)
        ow = self._overwrite_info(invariants)
        out = np.empty((n_win * h,) + x0.shape)
        nfe = []
        streams = []
        x = self.norm.norm_prog(x0)
        for w in range(n_win):
            t = w * h
            overwrite = None
            if ow is not None:
                c, k, mask = ow

                def overwrite(state, j, t=t):
                    s = t + j
                    if s >= fn.shape[0]:
                        return state
                    sst = (forcings[s, k] - self.norm.prog_mean[c]) / self.norm.prog_std[c]
                    state = state.copy()
                    state[c] = np.where(mask, sst, state[c])
                    return state

            res = self.sample_window(x, fn[t : t + h], inv, member=member, window=w, overwrite=overwrite)
            out[t : t + h] = res.states
            nfe.append(res.nfe)
            streams.append([cfg.seed, member, w])
            x = res.states[-1]
        phys = self.norm.denorm_prog(out[:H], axis=1)
        if ow is not None:
            c, k, mask = ow
            phys[:, c] = np.where(mask, forcings[1 : H + 1, k], phys[:, c])
        states = phys.astype(np.float32)
        if ow is not None:
            states[:, c] = np.where(mask, np.asarray(forcings[1 : H + 1, k], dtype=np.float32), states[:, c])
        return RolloutTrace(states, list(self.names), nfe, streams, member, cfg.seed,
                            {**cfg.to_dict(), "inference_horizon": H}, time.perf_counter() - t_start)

    def ensemble_rollout(self, x0, forcings, invariants, n_members: int | None = None, horizon: int | None = None,
                         members: Sequence[int] | None = None, jobs: int = 1) -> list:
        """One rollout per member; a diverged member yields its error in place of a trace."""
        ids = list(members) if members is not None else list(range(n_members or self.config.ensemble_size))
        if not ids:
            raise InvalidArgumentError("ensemble size must be >= 1")
        if jobs > 1 and len(ids) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futs = [pool.submit(_member_rollout, self, x0, forcings, invariants, m, horizon) for m in ids]
                return [f.result() for f in futs]
        return [_member_rollout(self, x0, forcings, invariants, m, horizon) for m in ids]

    def validation_crps(self, dataset) -> float:
        """Mean fair CRPS (normalized units) of a short ensemble rollout from the dataset's first state."""
        cfg = self.config
        H = cfg.inference_horizon
        prog = dataset.stack("prognostic")
        forcing = dataset.stack("forcing")
        need = max(-(-H // cfg.horizon) * cfg.horizon, H + 1)
        if forcing.shape[0] < need or prog.shape[0] < H + 1:
            raise InvalidArgumentError("validation trajectory is shorter than the validation rollout")
        results = self.ensemble_rollout(prog[0], forcing, dataset.stack("invariant"), cfg.ensemble_size, H)
        if any(isinstance(r, Exception) for r in results):
            return math.inf
        ens = np.stack([self.norm.norm_prog(r.states, axis=1) for r in results])
        truth = self.norm.norm_prog(prog[1 : H + 1], axis=1)
        return float(metrics.crps(ens, truth, dataset.grid).mean())


def _member_rollout(emu: Emulator, x0, forcings, invariants, member: int, horizon):
    try:
        return emu.rollout(x0, forcings, invariants, member=member, horizon=horizon)
    except DivergedSimulationError as exc:
        return exc


def extend_forcing(forcing: np.ndarray, period: int, n_steps: int) -> np.ndarray:
    """Extend a periodic forcing record ``(T, ...)`` to ``n_steps`` by repetition of its last period."""
    forcing = np.asarray(forcing)
    n = forcing.shape[0]
    if n >= n_steps:
        return forcing[:n_steps]
    if period < 1 or period > n:
        raise InvalidArgumentError(f"cannot extend {n} forcing steps with period {period}")
    idx = np.arange(n_steps)
    late = idx >= n
    idx[late] = idx[late] - period * ((idx[late] - n) // period + 1)
    return forcing[idx]


def expected_nfe(horizon: int, inference_horizon: int) -> dict:
    n_win = -(-inference_horizon // horizon)
    return {
        "per_window_forecaster": horizon,
        "per_window_interpolator": 2 * horizon - 3,
        "per_window_total": 3 * (horizon - 1),
        "windows": n_win,
        "total": 3 * (horizon - 1) * n_win,
    }
