"""Time-conditioned spherical neural operator with inference stochasticity.

Block layout (residual branch only)::

    norm -> (1 + scale) * . + offset -> SHT -> per-degree W_l -> inverse SHT
         -> MLP (GELU, dropout) -> drop path

The scale and offset of every block come from a shared 128-dim time
encoding: sine/cosine features at geometrically spaced periods, a
two-layer MLP, then one linear map per block.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from sphemu import autodiff as ad
from sphemu.autodiff import Tensor
from sphemu.errors import InvalidArgumentError
from sphemu.sphere import get_sht


@dataclass
class TimeEmbedConfig:
    num_frequencies: int = 32
    base_period: float = 16.0
    embed_dim: int = 128


@dataclass
class SfnoConfig:
    in_channels: int
    out_channels: int
    nlat: int
    nlon: int
    embed_dim: int = 32
    num_layers: int = 4
    lmax: int | None = None
    mlp_ratio: float = 2.0
    mlp_dropout_rate: float = 0.0
    drop_path_rate: float = 0.0
    max_time: int = 6
    norm_eps: float = 1e-6
    spectral_output: bool = False
    time_embed: TimeEmbedConfig = field(default_factory=TimeEmbedConfig)

    def __post_init__(self):
        if isinstance(self.time_embed, dict):
            self.time_embed = TimeEmbedConfig(**self.time_embed)
        if self.lmax is None:
            self.lmax = self.nlat - 1
        for name in ("in_channels", "out_channels", "nlat", "nlon", "embed_dim", "num_layers"):
            if int(getattr(self, name)) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0 <= self.lmax <= self.nlat - 1:
            raise InvalidArgumentError(f"lmax={self.lmax} exceeds nlat-1={self.nlat - 1}")
        for name in ("mlp_dropout_rate", "drop_path_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1)")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def fourier_features(t, num_frequencies: int = 32, base_period: float = 16.0) -> np.ndarray:
    """``[sin(2 pi t / P_k), cos(2 pi t / P_k)]`` for periods spaced geometrically in [1, base]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    periods = base_period ** (np.arange(num_frequencies) / (num_frequencies - 1))
    angles = 2.0 * np.pi * t[:, None] / periods[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_params(config: SfnoConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, hdim, te = config.embed_dim, config.hidden_dim, config.time_embed
    nfeat = 2 * te.num_frequencies
    nl = config.lmax + 1
    p: dict[str, np.ndarray] = {}
    p["lift.w"] = _normal(rng, (d, config.in_channels), 1.0 / np.sqrt(config.in_channels))
    p["lift.b"] = np.zeros(d)
    p["time.w1"] = _normal(rng, (te.embed_dim, nfeat), 1.0 / np.sqrt(nfeat))
    p["time.b1"] = np.zeros(te.embed_dim)
    p["time.w2"] = _normal(rng, (te.embed_dim, te.embed_dim), 1.0 / np.sqrt(te.embed_dim))
    p["time.b2"] = np.zeros(te.embed_dim)
    for k in range(config.num_layers):
        pre = f"blocks.{k}."
        p[pre + "norm.gamma"] = np.ones(d)
        p[pre + "norm.beta"] = np.zeros(d)
        p[pre + "scale.w"] = _normal(rng, (d, te.embed_dim), 0.1 / np.sqrt(te.embed_dim))
        p[pre + "scale.b"] = np.zeros(d)
        p[pre + "shift.w"] = _normal(rng, (d, te.embed_dim), 0.1 / np.sqrt(te.embed_dim))
        p[pre + "shift.b"] = np.zeros(d)
        p[pre + "spec.w_re"] = _normal(rng, (nl, d, d), np.sqrt(0.5 / d))
        p[pre + "spec.w_im"] = _normal(rng, (nl, d, d), np.sqrt(0.5 / d))
        p[pre + "mlp.w1"] = _normal(rng, (hdim, d), 1.0 / np.sqrt(d))
        p[pre + "mlp.b1"] = np.zeros(hdim)
        p[pre + "mlp.w2"] = _normal(rng, (d, hdim), 0.5 / np.sqrt(hdim))
        p[pre + "mlp.b2"] = np.zeros(d)
    p["proj.w"] = _normal(rng, (config.out_channels, d), 1.0 / np.sqrt(d))
    p["proj.b"] = np.zeros(config.out_channels)
    return p


class SFNO:
    """Parameters live in ``self.params`` as leaf tensors, keyed by name."""

    def __init__(self, config: SfnoConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        arrays = init_params(config, seed) if params is None else params
        expected = init_params(config, 0) if params is not None else arrays
        if params is not None:
            missing = set(expected) - set(params)
            if missing:
                raise InvalidArgumentError(f"missing parameters: {sorted(missing)}")
            for name, arr in expected.items():
                if np.shape(params[name]) != arr.shape:
                    raise InvalidArgumentError(f"parameter {name} has shape {np.shape(params[name])}, want {arr.shape}")
        self.params = {
            name: Tensor(np.array(arrays[name], dtype=np.float64), requires_grad=True, name=name)
            for name in expected
        }
        self.sht = get_sht(config.nlat, config.nlon, config.lmax)
        self.nfe = 0

    # -- helpers -------------------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(arrays[k], dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

    # -- pieces --------------------------------------------------------
    def time_embed(self, t) -> Tensor:
        """128-dim encoding for integer times, shape ``(B, embed_dim)``."""
        te = self.config.time_embed
        feats = Tensor(fourier_features(t, te.num_frequencies, te.base_period))
        h = ad.gelu(ad.linear(feats, self.p("time.w1"), self.p("time.b1")))
        return ad.linear(h, self.p("time.w2"), self.p("time.b2"))

    def block_modulation(self, k: int, emb: Tensor) -> tuple[Tensor, Tensor]:
        pre = f"blocks.{k}."
        scale = ad.add(ad.linear(emb, self.p(pre + "scale.w"), self.p(pre + "scale.b")), 1.0)
        shift = ad.linear(emb, self.p(pre + "shift.w"), self.p(pre + "shift.b"))
        return scale, shift

    def spectral_filter(self, k: int, x: Tensor) -> Tensor:
        pre = f"blocks.{k}."
        c = ad.sht_analysis(x, self.sht)
        c = ad.complex_spectral_multiply(c, self.p(pre + "spec.w_re"), self.p(pre + "spec.w_im"))
        return ad.sht_synthesis(c, self.sht)

    def block_forward(self, k: int, x: Tensor, scale: Tensor, shift: Tensor,
                      rngs=None, mlp_rate: float = 0.0, path_rate: float = 0.0) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.config.embed_dim or x.shape[2:] != (self.config.nlat, self.config.nlon):
            raise InvalidArgumentError(f"block input shape {x.shape} does not match the model")
        pre = f"blocks.{k}."
        h = ad.instance_norm(x, self.config.norm_eps)
        h = ad.affine_channels(h, self.p(pre + "norm.gamma"), self.p(pre + "norm.beta"))
        h = ad.scale_shift(h, scale, shift)
        h = self.spectral_filter(k, h)
        h = ad.pointwise_mlp(
            h,
            self.p(pre + "mlp.w1"), self.p(pre + "mlp.b1"),
            self.p(pre + "mlp.w2"), self.p(pre + "mlp.b2"),
            rate=mlp_rate, rngs=rngs,
        )
        h = ad.drop_path(h, path_rate, rngs)
        return ad.add(x, h)

    def lift(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.p("lift.w"), self.p("lift.b"))

    def project(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.p("proj.w"), self.p("proj.b"))

    # -- full network --------------------------------------------------
    def forward(self, inputs, t, rngs=None, stochastic: bool = False) -> Tensor:
        """Concatenate ``inputs`` on channels and map to ``out_channels``.

        ``t`` is an integer or one integer per batch row in
        ``{0, ..., max_time}``.  With ``stochastic=False`` every rate is
        zero and the output is a deterministic function of the inputs.
        """
        cfg = self.config
        parts = [inp if isinstance(inp, Tensor) else Tensor(inp) for inp in inputs]
        x = parts[0] if len(parts) == 1 else ad.concat_channels(parts, axis=1)
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.nlat, cfg.nlon):
            raise InvalidArgumentError(
                f"input shape {x.shape} does not match in_channels={cfg.in_channels}, grid={cfg.nlat}x{cfg.nlon}"
            )
        nb = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (nb,))
        if np.any(t < 0) or np.any(t > cfg.max_time) or np.any(t != np.round(t)):
            raise InvalidArgumentError(f"time condition {t} outside {{0..{cfg.max_time}}}")
        mlp_rate = cfg.mlp_dropout_rate if stochastic else 0.0
        path_rate = cfg.drop_path_rate if stochastic else 0.0
        if stochastic and (mlp_rate > 0 or path_rate > 0) and rngs is None:
            raise InvalidArgumentError("stochastic forward needs random generators")
        emb = self.time_embed(t)
        h = self.lift(x)
        for k in range(cfg.num_layers):
            scale, shift = self.block_modulation(k, emb)
            h = self.block_forward(k, h, scale, shift, rngs, mlp_rate, path_rate)
        self.nfe += 1
        out = self.project(h)
        if cfg.spectral_output:
            # keep only resolved degrees so grid-scale content cannot build up in rollouts
            out = ad.sht_synthesis(ad.sht_analysis(out, self.sht), self.sht)
        return out

    __call__ = forward
