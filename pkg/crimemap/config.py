"""
Pipeline configuration.

A run is configured by one TOML file of flat dotted keys::

    city = "synth_a"
    grid.center_lat = 41.8781
    train.iterations = 2000

plus ``--set key=value`` overrides. Every section is a dataclass with
``to_dict``/``from_dict``; unknown keys are rejected. The config hash is the
SHA-256 of the canonical JSON of everything that can change results.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type, TypeVar, Union

from .errors import ConfigError
from .evaluation import SplitSpec
from .geo import MAX_ZOOM, MIN_ZOOM, GridSpec
from .imagery.client import DEFAULT_API_KEY_ENV, ProviderConfig
from .ingest import CategoryPolicy, ColumnMapping
from .labeling import DEFAULT_RESTARTS
from .mapping import Palette
from .model import PRESETS, ArchSpec, TrainConfig, preset
from .simulation import CityLayout

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

T = TypeVar("T")

DEFAULT_ZOOMS = range(17, 21)
# Keys that never change results and so stay out of the config hash.
UNHASHED_KEYS = ("output_dir", "workers")


def _section(cls: Type[T], data: Dict[str, Any], name: str) -> T:
    """Build a flat dataclass section, turning bad keys and values into ConfigError."""
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {name} settings: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {name} settings: {e}") from e


@dataclass(frozen=True)
class IngestSettings:
    mapping: ColumnMapping = field(default_factory=ColumnMapping)
    policy: CategoryPolicy = field(default_factory=CategoryPolicy)

    def to_dict(self) -> Dict[str, Any]:
        return {"mapping": self.mapping.to_dict(), "policy": self.policy.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IngestSettings":
        unknown = set(data) - {"mapping", "policy"}
        if unknown:
            raise ConfigError(f"Unknown ingest settings: {', '.join(sorted(unknown))}")
        try:
            return cls(
                mapping=ColumnMapping.from_dict(data.get("mapping", {})),
                policy=CategoryPolicy.from_dict(data.get("policy", {})),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid ingest settings: {e}") from e


@dataclass(frozen=True)
class GridSettings:
    """
    Either an explicit bounding box or a center with a cell count.
    """

    lat_min: Optional[float] = None
    lat_max: Optional[float] = None
    lon_min: Optional[float] = None
    lon_max: Optional[float] = None
    center_lat: Optional[float] = None
    center_lon: Optional[float] = None
    n_rows: Optional[int] = None
    n_cols: Optional[int] = None
    cell_side_m: float = 30.0

    def to_grid(self) -> GridSpec:
        bbox = (self.lat_min, self.lat_max, self.lon_min, self.lon_max)
        centered = (self.center_lat, self.center_lon, self.n_rows, self.n_cols)
        if all(v is not None for v in bbox):
            return GridSpec(
                *bbox, cell_side_m=self.cell_side_m  # type: ignore[arg-type]
            )
        if all(v is not None for v in centered):
            return GridSpec.around(
                *centered, cell_side_m=self.cell_side_m  # type: ignore[arg-type]
            )
        raise ConfigError(
            "grid needs lat_min/lat_max/lon_min/lon_max "
            "or center_lat/center_lon/n_rows/n_cols"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class BinningSettings:
    method: str = "kmeans"
    seed: int = 0
    restarts: int = DEFAULT_RESTARTS

    def __post_init__(self) -> None:
        if self.method not in ("kmeans", "jenks"):
            raise ConfigError(
                f"binning.method must be kmeans or jenks, got {self.method!r}"
            )
        if self.restarts < 1:
            raise ConfigError("binning.restarts must be at least 1")


@dataclass(frozen=True)
class BalanceSettings:
    enabled: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ImagerySettings:
    """
    Tile source settings. ``provider = "remote"`` must be chosen explicitly;
    the synthetic provider needs no network.
    """

    provider: str = "synthetic"
    url_template: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    cache_dir: Optional[str] = None
    rate_limit: float = 10.0
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 30.0
    zoom: int = 17
    size_px: int = 256
    allow_any_zoom: bool = False
    synthetic_seed: int = 0
    max_failure_fraction: float = 0.01

    def __post_init__(self) -> None:
        if self.provider not in ("synthetic", "remote"):
            raise ConfigError(
                f"imagery.provider must be synthetic or remote, got {self.provider!r}"
            )
        allowed = (
            range(MIN_ZOOM, MAX_ZOOM + 1) if self.allow_any_zoom else DEFAULT_ZOOMS
        )
        if self.zoom not in allowed:
            low, high = allowed.start, allowed.stop - 1
            message = f"imagery.zoom {self.zoom} outside [{low}, {high}]"
            if not self.allow_any_zoom:
                message += "; set imagery.allow_any_zoom to override"
            raise ConfigError(message)
        if self.size_px < 1:
            raise ConfigError("imagery.size_px must be positive")
        if not 0 <= self.max_failure_fraction < 1:
            raise ConfigError("imagery.max_failure_fraction must lie in [0, 1)")
        if self.provider == "remote":
            self.provider_config()

    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(
            url_template=self.url_template,
            api_key_env=self.api_key_env,
            cache_dir=self.cache_dir,
            rate_limit=self.rate_limit,
            retries=self.retries,
            backoff_s=self.backoff_s,
            timeout_s=self.timeout_s,
        )


@dataclass(frozen=True)
class ModelSettings:
    arch: str = "desk"

    def __post_init__(self) -> None:
        preset(self.arch)

    def arch_spec(self) -> ArchSpec:
        return PRESETS[self.arch]


@dataclass(frozen=True)
class SyntheticSettings:
    """Layout of the synthetic city used by synth-city and offline runs."""

    seed: int = 0
    background: float = 0.3
    n_hotspots: int = 6
    nonviolent_fraction: float = 0.25

    def layout(self) -> CityLayout:
        return CityLayout(
            background=self.background,
            n_hotspots=self.n_hotspots,
            nonviolent_fraction=self.nonviolent_fraction,
        )


@dataclass(frozen=True)
class RenderSettings:
    scale_px_per_cell: int = 4
    low: Any = (0, 0, 255)
    neutral: Any = (255, 255, 0)
    high: Any = (255, 0, 0)

    def __post_init__(self) -> None:
        if self.scale_px_per_cell < 1:
            raise ConfigError("render.scale_px_per_cell must be at least 1")
        self.palette()

    def palette(self) -> Palette:
        return Palette(tuple(self.low), tuple(self.neutral), tuple(self.high))

    def to_dict(self) -> Dict[str, Any]:
        return {"scale_px_per_cell": self.scale_px_per_cell, **self.palette().to_dict()}


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved configuration of one pipeline run."""

    city: str = "city"
    output_dir: str = "output"
    workers: int = 8
    ingest: IngestSettings = field(default_factory=IngestSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    binning: BinningSettings = field(default_factory=BinningSettings)
    balance: BalanceSettings = field(default_factory=BalanceSettings)
    imagery: ImagerySettings = field(default_factory=ImagerySettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self) -> None:
        if not self.city or any(c in self.city for c in "/\\"):
            raise ConfigError(f"city must be a plain name, got {self.city!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "city": self.city,
            "output_dir": self.output_dir,
            "workers": self.workers,
            "ingest": self.ingest.to_dict(),
            "grid": self.grid.to_dict(),
            "binning": asdict(self.binning),
            "balance": asdict(self.balance),
            "imagery": asdict(self.imagery),
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "split": self.split.to_dict(),
            "synthetic": asdict(self.synthetic),
            "render": self.render.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        sections: Dict[str, Type[Any]] = {
            "grid": GridSettings,
            "binning": BinningSettings,
            "balance": BalanceSettings,
            "imagery": ImagerySettings,
            "model": ModelSettings,
            "train": TrainConfig,
            "split": SplitSpec,
            "synthetic": SyntheticSettings,
            "render": RenderSettings,
        }
        scalars = {"city", "output_dir", "workers"}
        unknown = set(data) - scalars - set(sections) - {"ingest"}
        if unknown:
            raise ConfigError(
                f"Unknown configuration keys: {', '.join(sorted(unknown))}"
            )
        kwargs: Dict[str, Any] = {k: data[k] for k in scalars if k in data}
        for name, section_cls in sections.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{name} must be a table of settings")
            kwargs[name] = _section(section_cls, section, name)
        kwargs["ingest"] = IngestSettings.from_dict(data.get("ingest", {}))
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @property
    def config_hash(self) -> str:
        data = self.to_dict()
        for key in UNHASHED_KEYS:
            data.pop(key, None)
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def grid_spec(self) -> GridSpec:
        return self.grid.to_grid()


def parse_override(assignment: str) -> Dict[str, Any]:
    """
    Turn ``a.b.c=value`` into ``{"a": {"b": {"c": value}}}``.

    The value is read as a TOML scalar (numbers, booleans, quoted strings,
    arrays) and falls back to the raw string.
    """
    if "=" not in assignment:
        raise ConfigError(f"Override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"Invalid override key: {key!r}")
    try:
        value: Any = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    nested: Dict[str, Any] = {}
    node = nested
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return nested


def merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; ``extra`` wins."""
    result = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = value
    return result


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> PipelineConfig:
    """
    Read a TOML config (optional) and apply ``key=value`` overrides.

    Raises:
        ConfigError: If the file is missing, malformed, or holds invalid settings
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Malformed config file {path}: {e}") from e
    for assignment in overrides:
        data = merge(data, parse_override(assignment))
    return PipelineConfig.from_dict(data)
