"""Pipeline configuration: one JSON file, every key optional, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .autodiff import TrainSchedule
from .errors import ConfigError
from .network import NetworkSpec
from .scene import SceneConfig
from .waterfill import WaterFillConfig


@dataclass(frozen=True)
class RenderConfig:
    n_cameras: int = 8
    altitude: float = 150.0
    tilt_range: tuple[float, float] = (10.0, 25.0)
    image_size: int = 256
    gsd: float = 0.27


@dataclass(frozen=True)
class SweepSettings:
    """Sweep options; the plane range comes from the scene unless given."""

    plane_step: float = 0.2
    z_margin: float = 0.5
    z_min: float | None = None
    z_max: float | None = None
    k_drop: int = 2
    lambda_smooth: float = 0.0005
    truncation: float = 0.04
    max_cost: float = 0.04
    window: int = 1
    levels: int = 2
    band: int = 2
    max_cycles: int = 5


@dataclass(frozen=True)
class ExtractConfig:
    samples_per_class: int = 5000
    polygons_per_class: int = 24
    polygon_side: float | None = 4.0    # meters; None starts at a quarter of the scene and shrinks to fit
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    min_valid_fraction: float = 0.9
    cell_size: float = 0.25
    z_pad: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    experiments: tuple[str, ...] = ("full", "mosaic", "unrelated")
    precision: str = "float32"
    steps_per_epoch: int = 100


@dataclass(frozen=True)
class ClassifyConfig:
    stride: int = 2
    batch: int = 512


@dataclass(frozen=True)
class MaskConfig:
    cell_size: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "mvvc_out"
    n_train_scenes: int = 2
    scene: SceneConfig = field(default_factory=SceneConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(total_steps=800))
    train: TrainConfig = field(default_factory=TrainConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    fill: WaterFillConfig = field(default_factory=lambda: WaterFillConfig(shore_band=2.0))

    def to_json(self) -> dict:
        return _to_plain(asdict(self))

    def hash(self, *sections: str) -> str:
        d = self.to_json()
        d.pop("out")  # where results go never changes what they are
        if sections:
            # "section" or "section.field"
            picked = {}
            for name in sections:
                head, _, leaf = name.partition(".")
                picked[name] = d[head][leaf] if leaf else d[head]
            d = picked
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=int(seed))


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        if cls is PipelineConfig:
            defaults = {f.name: f.default_factory() for f in dataclasses.fields(cls)
                        if f.default_factory is not dataclasses.MISSING}
            return cls(**{**defaults, **kwargs})
        if cls is WaterFillConfig and where.endswith("fill"):
            return dataclasses.replace(PipelineConfig().fill, **kwargs)
        if cls is TrainSchedule and where.endswith("schedule"):
            return dataclasses.replace(PipelineConfig().schedule, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    (PipelineConfig, "scene"): SceneConfig,
    (PipelineConfig, "render"): RenderConfig,
    (PipelineConfig, "sweep"): SweepSettings,
    (PipelineConfig, "extract"): ExtractConfig,
    (PipelineConfig, "network"): NetworkSpec,
    (PipelineConfig, "schedule"): TrainSchedule,
    (PipelineConfig, "train"): TrainConfig,
    (PipelineConfig, "classify"): ClassifyConfig,
    (PipelineConfig, "mask"): MaskConfig,
    (PipelineConfig, "fill"): WaterFillConfig,
}


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "config")
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def _validate(cfg: PipelineConfig) -> None:
    from .samples import BaselineMode

    for e in cfg.train.experiments:
        try:
            BaselineMode(e)
        except ValueError:
            raise ConfigError(f"train.experiments: unknown mode {e!r}") from None
    if "full" not in cfg.train.experiments:
        raise ConfigError("train.experiments must include 'full' (its model drives classify)")
    if cfg.train.precision not in ("float32", "float64"):
        raise ConfigError("train.precision must be 'float32' or 'float64'")
    if cfg.render.n_cameras < 2:
        raise ConfigError("render.n_cameras must be >= 2")
    if cfg.n_train_scenes < 0:
        raise ConfigError("n_train_scenes must be >= 0")
    if cfg.classify.stride < 1:
        raise ConfigError("classify.stride must be >= 1")
    if cfg.sweep.plane_step <= 0:
        raise ConfigError("sweep.plane_step must be positive")
    if cfg.sweep.window < 1 or cfg.sweep.window % 2 == 0:
        raise ConfigError("sweep.window must be a positive odd integer")
    if not 0 <= cfg.extract.val_fraction < 1 or not 0 <= cfg.extract.test_fraction < 1:
        raise ConfigError("extract fractions must lie in [0, 1)")
