"""Tile acquisition: remote static maps, synthetic tiles, and datasets."""

from .client import (
    ProviderConfig,
    RateLimiter,
    TileClient,
    fetch_tile,
    tile_request_url,
)
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    TileDataset,
    build_dataset,
    load_dataset,
)
from .synthetic import SyntheticTileProvider, synth_tile
from .tiles import ImageTile, TileProvider, TileSource, to_model_input

__all__ = [
    "DatasetManifest",
    "ImageTile",
    "ManifestEntry",
    "ProviderConfig",
    "RateLimiter",
    "SyntheticTileProvider",
    "TileClient",
    "TileDataset",
    "TileProvider",
    "TileSource",
    "build_dataset",
    "fetch_tile",
    "load_dataset",
    "synth_tile",
    "tile_request_url",
    "to_model_input",
]
