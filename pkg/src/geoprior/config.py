"""Pipeline configuration: versioned TOML with one table per stage.

Every key has a default.  Unknown keys and tables are rejected, and
``None`` values are simply left out of the emitted TOML, so
parse -> emit -> parse is a fixed point.
"""

from __future__ import annotations

import dataclasses
import hashlib
import sys
from dataclasses import dataclass, field

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ViewsSection:
    mode: str = "SD_FRONT"
    count: int = 8
    azimuth_limit: float | None = None
    elevation_limit: float | None = None
    radius: float = 2.5
    reference_elevation: float = 0.0
    focal: float = 80.0
    resolution: int = 64


@dataclass
class VolumeSection:
    dims: tuple[int, int, int] = (150, 150, 150)
    bounds: tuple[float, float] = (-1.0, 1.0)
    extractor: str = "GRADIENT_AUG"
    extractor_weights: str | None = None
    f3d_weights: str | None = None
    chunk: int = 65536


@dataclass
class FieldsSection:
    pe_levels: int = 6
    geometry_hidden: tuple[int, ...] = (64, 64)
    texture_hidden: int = 32
    init_radius: float = 0.5
    hash_levels: int = 8
    hash_table_size: int = 16384
    hash_features: int = 2
    hash_base_resolution: int = 16
    hash_growth: float = 1.5


@dataclass
class RenderSection:
    samples_per_ray: int = 64
    sharpness: float = 50.0
    near: float = 0.5
    far: float = 4.5
    resolution: int | None = None
    stratified: bool = False
    azimuth: float = 0.0
    elevation: float = 15.0
    radius: float = 2.5
    focal: float = 80.0
    width: int = 64
    height: int = 64


@dataclass
class RefineSection:
    iterations: int = 1000
    batch: int = 1
    volume_lr_lo: float = 1e-3
    volume_lr_hi: float = 1e-2
    ramp_fraction: float = 0.5
    texture_lr_hi: float = 1e-2
    texture_lr_lo: float = 1e-3
    lr_texture_mlp: float = 1e-3
    lr_lora: float = 1e-3
    grad_clip: float = 10.0
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    radius_range: tuple[float, float] = (2.5, 2.5)
    focal: float = 40.0
    resolution: int = 32


@dataclass
class ProvidersSection:
    pretrained: str = "ANALYTIC_GAUSSIAN"
    pretrained_command: tuple[str, ...] = ()
    lora: str = "TRAINABLE_SMALL_NET"
    lora_command: tuple[str, ...] = ()
    parameterization: str = "EPSILON"
    target_mean: float = 0.5
    target_variance: float = 0.0
    net_side: int = 8
    net_hidden: int = 64
    steps: int = 1000
    condition: int = 0


@dataclass
class MeshSection:
    resolution: int = 96
    bounds: tuple[float, float] = (-1.0, 1.0)
    geometry_iterations: int = 500
    texture_iterations: int = 500
    render_resolution: int = 512  # 0: render at the refine pose resolution
    lr_sdf: float = 1e-3
    lr_deformation: float = 1e-3


@dataclass
class MetricsSection:
    count: int = 120
    elevation: float = 15.0
    radius: float = 2.5
    resolution: int = 64
    captions: tuple[str, ...] = ("an object",)
    correct_index: int = 0
    embedding_dim: int = 64
    embedding: str = "TOY_DETERMINISTIC"
    image_command: tuple[str, ...] = ()
    text_command: tuple[str, ...] = ()
    pointcloud_command: tuple[str, ...] = ()


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    views: ViewsSection = field(default_factory=ViewsSection)
    volume: VolumeSection = field(default_factory=VolumeSection)
    fields: FieldsSection = field(default_factory=FieldsSection)
    render: RenderSection = field(default_factory=RenderSection)
    refine: RefineSection = field(default_factory=RefineSection)
    providers: ProvidersSection = field(default_factory=ProvidersSection)
    mesh: MeshSection = field(default_factory=MeshSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return _emit(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]


def _emit(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            out[f.name] = _emit(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _coerce(name: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected an array, got {value!r}")
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if default is not None and not isinstance(value, type(default)):
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where or 'top level'}]: {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(key, default, value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if "version" not in data:
        raise ConfigError("config is missing the mandatory 'version' key")
    if data["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data['version']!r} (expected {CONFIG_VERSION})")
    return _build(PipelineConfig, data, "")


def loads(text: str) -> PipelineConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(data)


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


def save(config: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(config.dumps())
