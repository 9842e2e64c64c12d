"""
Labeled tile datasets on disk.

Layout under the dataset root::

    manifest.tsv     cell_id, lat, lon, zoom, label, relative path (sorted by row, col)
    fetch_log.tsv    cell_id, source, UTC fetch time
    tiles/r{row}c{col}.png
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from ..errors import CrimeMapError, DatasetBuildError, DegenerateInputError
from ..geo import CellId, GridSpec, TileGeometry, cell_center
from ..labeling import CrimeLevel, LabeledCell
from .tiles import ImageTile, TileProvider, to_model_input

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
FETCH_LOG_NAME = "fetch_log.tsv"
TILES_DIR = "tiles"
DEFAULT_WORKERS = 8
DEFAULT_MAX_FAILURE_FRACTION = 0.01


@dataclass(frozen=True)
class ManifestEntry:
    """One tile of a dataset."""

    cell: CellId
    lat: float
    lon: float
    zoom: int
    level: CrimeLevel
    path: str

    def to_line(self) -> str:
        return "\t".join(
            [
                str(self.cell),
                f"{self.lat:.7f}",
                f"{self.lon:.7f}",
                str(self.zoom),
                self.level.label,
                self.path,
            ]
        )

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ValueError(f"expected 6 tab-separated fields, got {len(parts)}")
        cell, lat, lon, zoom, label, path = parts
        return cls(
            CellId.parse(cell),
            float(lat),
            float(lon),
            int(zoom),
            CrimeLevel.parse(label),
            path,
        )


@dataclass
class DatasetManifest:
    """Entries of a dataset plus the cells whose tiles could not be fetched."""

    root: Path
    entries: List[ManifestEntry]
    failures: List[Tuple[CellId, str]] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def __len__(self) -> int:
        return len(self.entries)

    def write(self) -> None:
        with open(self.path, "w", encoding="utf-8", newline="\n") as f:
            for entry in self.entries:
                f.write(entry.to_line() + "\n")

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.root, [self.entries[i] for i in indices])

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        """
        Load a manifest file; ``path`` may be the file or its directory.

        Raises:
            CrimeMapError: If the file is missing or a line is malformed
        """
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        entries = []
        try:
            with open(path, encoding="utf-8") as f:
                for number, line in enumerate(f, start=1):
                    if line.strip():
                        try:
                            entries.append(ManifestEntry.from_line(line))
                        except ValueError as e:
                            raise CrimeMapError(f"{path}:{number}: {e}") from e
        except OSError as e:
            raise CrimeMapError(f"Failed to read manifest {path}: {e}") from e
        return cls(path.parent, entries)


class _FetchOutcome(NamedTuple):
    cell: LabeledCell
    geom: TileGeometry
    tile: Union[ImageTile, None]
    error: str
    fetched_at: str


def _fetch_one(
    provider: TileProvider, cell: LabeledCell, geom: TileGeometry
) -> _FetchOutcome:
    fetched_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        return _FetchOutcome(cell, geom, provider.fetch(geom), "", fetched_at)
    except CrimeMapError as e:
        logger.warning(f"Tile for {cell.cell} failed: {e}")
        return _FetchOutcome(cell, geom, None, str(e), fetched_at)


def build_dataset(
    cells: Sequence[LabeledCell],
    provider: TileProvider,
    grid: GridSpec,
    out_dir: Union[str, Path],
    zoom: int = 17,
    size_px: int = 256,
    workers: int = DEFAULT_WORKERS,
    max_failure_fraction: float = DEFAULT_MAX_FAILURE_FRACTION,
) -> DatasetManifest:
    """
    Fetch one tile centered on each labeled cell and store a manifest.

    Manifest lines are sorted by (row, col) whatever order the fetches finish
    in. Failed cells are left out of the manifest and listed in the fetch log.

    Raises:
        DegenerateInputError: If ``cells`` is empty
        DatasetBuildError: If more than ``max_failure_fraction`` of the cells failed
    """
    if not cells:
        raise DegenerateInputError("No labeled cells to build a dataset from")
    root = Path(out_dir)
    (root / TILES_DIR).mkdir(parents=True, exist_ok=True)
    ordered = sorted(cells, key=lambda c: (c.cell.row, c.cell.col))
    geoms = [
        TileGeometry(*cell_center(c.cell, grid), zoom=zoom, size_px=size_px)
        for c in ordered
    ]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(
            pool.map(lambda pair: _fetch_one(provider, *pair), zip(ordered, geoms))
        )

    entries: List[ManifestEntry] = []
    failures: List[Tuple[CellId, str]] = []
    sources: Dict[str, int] = {}
    with open(root / FETCH_LOG_NAME, "w", encoding="utf-8", newline="\n") as log:
        for outcome in outcomes:
            cell = outcome.cell
            if outcome.tile is None:
                failures.append((cell.cell, outcome.error))
                log.write(f"{cell.cell}\tfailed\t{outcome.fetched_at}\n")
                continue
            relpath = f"{TILES_DIR}/{cell.cell}.png"
            (root / relpath).write_bytes(outcome.tile.to_png_bytes())
            source = outcome.tile.source.value
            sources[source] = sources.get(source, 0) + 1
            log.write(f"{cell.cell}\t{source}\t{outcome.fetched_at}\n")
            entries.append(
                ManifestEntry(
                    cell.cell,
                    outcome.geom.center_lat,
                    outcome.geom.center_lon,
                    zoom,
                    cell.level,
                    relpath,
                )
            )

    manifest = DatasetManifest(root, entries, failures)
    summary = {
        "cells": len(ordered),
        "stored": len(entries),
        "failed": len(failures),
        "sources": sources,
    }
    logger.info(f"fetch_summary {json.dumps(summary, sort_keys=True)}")
    if len(failures) > max_failure_fraction * len(ordered):
        raise DatasetBuildError(
            f"{len(failures)} of {len(ordered)} tiles failed "
            f"(limit {max_failure_fraction:.1%}); "
            f"first: {failures[0][0]}: {failures[0][1]}"
        )
    manifest.write()
    return manifest


@dataclass
class TileDataset:
    """Preprocessed network inputs for a manifest."""

    images: np.ndarray
    labels: np.ndarray
    entries: List[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, indices: Sequence[int]) -> "TileDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TileDataset(
            self.images[idx], self.labels[idx], [self.entries[i] for i in idx]
        )


def load_dataset(
    manifest: Union[DatasetManifest, str, Path], input_shape: Tuple[int, int, int]
) -> TileDataset:
    """
    Decode every tile of a manifest and downscale it to ``input_shape``.

    Returns:
        TileDataset with float32 images (N, H, W, C) in [0, 1] and int64 labels

    Raises:
        DegenerateInputError: If the manifest has no entries
        CrimeMapError: If a tile file is missing or unreadable
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    if not manifest.entries:
        raise DegenerateInputError(f"Dataset {manifest.path} has no entries")
    images = np.empty((len(manifest.entries), *input_shape), dtype=np.float32)
    for i, entry in enumerate(manifest.entries):
        tile_path = manifest.root / entry.path
        try:
            with Image.open(tile_path) as image:
                pixels = np.asarray(image.convert("RGB"))
        except OSError as e:
            raise CrimeMapError(f"Failed to read tile {tile_path}: {e}") from e
        images[i] = to_model_input(pixels, input_shape)
    labels = np.array([int(e.level) for e in manifest.entries], dtype=np.int64)
    return TileDataset(images, labels, list(manifest.entries))
