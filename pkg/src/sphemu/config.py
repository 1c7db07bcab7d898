"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from sphemu.errors import InvalidArgumentError

OUTPUT_ROOT_ENV = "SPHEMU_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "sphemu_runs"


class ConfigError(InvalidArgumentError):
    pass


@dataclass
class GridSection:
    nlat: int = 32
    nlon: int | None = None
    lmax: int | None = None


@dataclass
class ToyClimateSection:
    layers: int = 2
    sigma: list[float] = field(default_factory=lambda: [0.0, 0.45, 1.0])
    period: int = 64
    n_steps: int = 640
    spinup_steps: int = 128
    substeps: int = 4
    step_length: float = 0.25
    coupling: float = 1.0
    forcing_strength: float = 1.0
    damping: float = 1.0
    rotation: float = 1.0
    jet_speed: list[float] = field(default_factory=lambda: [0.04, 0.1])
    eddy_forcing: float = 0.06
    slow_timescale: float = 10000.0
    slow_amplitude: float = 1.0
    slow_excitation: float = 0.002
    include_derived: bool = False


@dataclass
class NetworkSection:
    embed_dim: int = 32
    num_layers: int = 4
    mlp_ratio: float = 1.0
    mlp_dropout_rate: float = 0.0
    drop_path_rate: float = 0.0
    num_frequencies: int = 32
    base_period: float = 16.0
    time_embed_dim: int = 128
    spectral_output: bool = True


@dataclass
class ModelSection:
    interpolator: NetworkSection = field(
        default_factory=lambda: NetworkSection(mlp_dropout_rate=0.1, drop_path_rate=0.1)
    )
    forecaster: NetworkSection = field(default_factory=NetworkSection)
    residual: bool = True


@dataclass
class TrainingSection:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 4e-4
    weight_decay: float = 5e-3
    clip_norm: float = 0.5
    ema_decay: float = 0.9999
    window_stride: int = 3
    max_steps_per_epoch: int | None = None
    early_stopping: bool = True
    val_rollout_steps: int = 40
    val_ensemble: int = 4
    val_windows: int = 16
    input_noise: float = 1.0
    pushforward: float = 0.0


@dataclass
class DyffusionSection:
    horizon: int = 6
    inference_horizon: int = 640
    ensemble_size: int = 8
    noise_mode: str = "independent"
    stochastic: bool = True
    use_ema: bool = False


@dataclass
class EvaluationSection:
    short_window: int = 10
    start: int = 0
    stop: int | None = None


@dataclass
class DataSection:
    members: int = 11
    validation_members: int = 1


@dataclass
class SeedSection:
    data: int = 2024
    training: int = 0
    inference: int = 0


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    toy_climate: ToyClimateSection = field(default_factory=ToyClimateSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dyffusion: DyffusionSection = field(default_factory=DyffusionSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output_dir: str | None = None

    # -- derived objects ---------------------------------------------------
    def toy_config(self):
        from sphemu.toy_climate import ToyClimateConfig

        d = dataclasses.asdict(self.toy_climate)
        d["sigma"] = tuple(d["sigma"])
        d["jet_speed"] = tuple(d["jet_speed"])
        return ToyClimateConfig(nlat=self.grid.nlat, nlon=self.grid.nlon, lmax=self.grid.lmax, **d)

    def network_dict(self, role: str) -> dict:
        sec: NetworkSection = getattr(self.model, role)
        toy = self.toy_config()
        return {
            "in_channels": 1,
            "out_channels": 1,
            "nlat": toy.nlat,
            "nlon": toy.nlon,
            "lmax": toy.lmax,
            "embed_dim": sec.embed_dim,
            "num_layers": sec.num_layers,
            "mlp_ratio": sec.mlp_ratio,
            "mlp_dropout_rate": sec.mlp_dropout_rate,
            "drop_path_rate": sec.drop_path_rate,
            "spectral_output": sec.spectral_output,
            "time_embed": {
                "num_frequencies": sec.num_frequencies,
                "base_period": sec.base_period,
                "embed_dim": sec.time_embed_dim,
            },
        }

    def train_config(self):
        from sphemu.dyffusion import TrainConfig

        return TrainConfig(seed=self.seeds.training, **dataclasses.asdict(self.training))

    def dyffusion_config(self, **overrides):
        from sphemu.dyffusion import DyffusionConfig

        d = dataclasses.asdict(self.dyffusion)
        d["seed"] = self.seeds.inference
        d.update({k: v for k, v in overrides.items() if v is not None})
        return DyffusionConfig(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def output_root(self, override: str | None = None) -> Path:
        return resolve_output_root(override or self.output_dir)


def _build(cls, data, where: str, base=None):
    # unspecified keys keep the parent's defaults (e.g. interpolator dropout)
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    base = base if base is not None else cls()
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get((cls, name))
        if sub:
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name, getattr(base, name))
        else:
            kwargs[name] = value
    return dataclasses.replace(base, **kwargs)


_SECTION_TYPES = {
    (RunConfig, "grid"): GridSection,
    (RunConfig, "toy_climate"): ToyClimateSection,
    (RunConfig, "data"): DataSection,
    (RunConfig, "model"): ModelSection,
    (RunConfig, "training"): TrainingSection,
    (RunConfig, "dyffusion"): DyffusionSection,
    (RunConfig, "evaluation"): EvaluationSection,
    (RunConfig, "seeds"): SeedSection,
    (ModelSection, "interpolator"): NetworkSection,
    (ModelSection, "forecaster"): NetworkSection,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    try:
        cfg.toy_config()
        cfg.train_config()
        cfg.dyffusion_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def resolve_output_root(explicit: str | os.PathLike | None = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)


def code_version() -> dict:
    """Package version plus a digest of the package sources."""
    from sphemu import __version__

    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for p in sorted(pkg.glob("*.py")) + sorted(pkg.glob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"version": __version__, "source_sha256": h.hexdigest()}


def write_resolved(cfg: RunConfig, directory, command: str, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "code": code_version(), "config": cfg.to_dict()}
    if extra:
        doc["arguments"] = extra
    path = directory / f"resolved_config.{command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path
