"""
City-scale crime maps: prediction, comparison, and rendering.

A CityMap holds one label per grid cell in row-major order (row 0 south),
with -1 marking cells whose label is unknown. PNG renderings put north at the
top, so image row 0 shows the last grid row.
"""

import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import geojson
import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo
from sklearn.metrics import confusion_matrix

from .errors import (
    ConfigError,
    CrimeMapError,
    DatasetBuildError,
    DegenerateInputError,
    GeoRangeError,
    ShapeError,
)
from .geo import CellId, GridSpec, TileGeometry, cell_center
from .imagery.tiles import TileProvider, to_model_input
from .labeling import CrimeLevel, LabeledCell
from .model import ModelParams, predict

logger = logging.getLogger(__name__)

UNKNOWN = -1
RGB = Tuple[int, int, int]
GEOJSON_PRECISION = 9
PREDICT_CHUNK = 512


class Provenance(str, Enum):
    OFFICIAL = "official"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class Palette:
    """Display color per crime level."""

    low: RGB = (0, 0, 255)
    neutral: RGB = (255, 255, 0)
    high: RGB = (255, 0, 0)

    def __post_init__(self) -> None:
        colors = [tuple(int(v) for v in c) for c in (self.low, self.neutral, self.high)]
        for c in colors:
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ConfigError(
                    f"Palette colors must be RGB triples in 0..255, got {c}"
                )
        if len(set(colors)) != 3:
            raise ConfigError("Palette colors must be distinct")
        object.__setattr__(self, "low", colors[0])
        object.__setattr__(self, "neutral", colors[1])
        object.__setattr__(self, "high", colors[2])

    def color(self, level: CrimeLevel) -> RGB:
        return (self.low, self.neutral, self.high)[int(level)]

    def to_dict(self) -> Dict[str, List[int]]:
        return {
            "low": list(self.low),
            "neutral": list(self.neutral),
            "high": list(self.high),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Palette":
        return cls(**{k: tuple(v) for k, v in data.items()})


DEFAULT_PALETTE = Palette()


@dataclass
class CityMap:
    """
    Crime-level map over a grid.

    Attributes:
        grid: Grid the labels refer to
        labels: int8 array of length n_cells; CrimeLevel values or UNKNOWN
        provenance: Official (from reports) or predicted (from imagery)
        city: Name used in output file names
        scores: Optional float per cell (crime count or predicted probability)
        model_id: SHA-256 of the model file used for prediction
        bins_id: SHA-256 of the bin model used for labeling
        config_hash: Hash of the pipeline configuration
    """

    grid: GridSpec
    labels: np.ndarray
    provenance: Provenance
    city: str = "city"
    scores: Optional[np.ndarray] = None
    model_id: Optional[str] = None
    bins_id: Optional[str] = None
    config_hash: Optional[str] = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (self.grid.n_cells,):
            raise ShapeError(
                f"Map has {self.labels.size} labels "
                f"for a grid of {self.grid.n_cells} cells"
            )
        if np.any((self.labels < UNKNOWN) | (self.labels > int(CrimeLevel.HIGH))):
            raise ShapeError("Map labels must be crime levels or UNKNOWN")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != self.labels.shape:
                raise ShapeError("Map scores must have one value per cell")

    def label_at(self, cell: CellId) -> Optional[CrimeLevel]:
        value = int(self.labels[self.grid.flat_index(cell)])
        return None if value == UNKNOWN else CrimeLevel(value)

    def as_grid(self) -> np.ndarray:
        """Labels shaped (n_rows, n_cols), row 0 south."""
        return self.labels.reshape(self.grid.n_rows, self.grid.n_cols)

    def known_count(self) -> int:
        return int(np.sum(self.labels != UNKNOWN))

    def to_dict(self) -> Dict[str, Any]:
        scores = None
        if self.scores is not None:
            scores = [None if not np.isfinite(s) else float(s) for s in self.scores]
        return {
            "city": self.city,
            "provenance": self.provenance.value,
            "grid": self.grid.to_dict(),
            "labels": [int(v) for v in self.labels],
            "scores": scores,
            "model_id": self.model_id,
            "bins_id": self.bins_id,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CityMap":
        scores = data.get("scores")
        return cls(
            grid=GridSpec.from_dict(data["grid"]),
            labels=np.array(data["labels"], dtype=np.int8),
            provenance=Provenance(data["provenance"]),
            city=data.get("city", "city"),
            scores=(
                None
                if scores is None
                else np.array(
                    [np.nan if s is None else s for s in scores], dtype=np.float64
                )
            ),
            model_id=data.get("model_id"),
            bins_id=data.get("bins_id"),
            config_hash=data.get("config_hash"),
        )


def save_map(city_map: CityMap, path: Union[str, Path]) -> None:
    text = json.dumps(city_map.to_dict(), sort_keys=True, indent=1) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_map(path: Union[str, Path]) -> CityMap:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return CityMap.from_dict(data)
    except (OSError, ValueError, KeyError) as e:
        raise CrimeMapError(f"Failed to load map from {path}: {e}") from e


def official_map(
    labeled: Sequence[LabeledCell],
    grid: GridSpec,
    city: str = "city",
    **ids: Optional[str],
) -> CityMap:
    """
    Map of the report-derived labels; cells without a label stay unknown.

    Raises:
        GeoRangeError: If a labeled cell lies outside the grid
    """
    labels = np.full(grid.n_cells, UNKNOWN, dtype=np.int8)
    scores = np.full(grid.n_cells, np.nan)
    for lc in labeled:
        if not grid.contains_cell(lc.cell):
            raise GeoRangeError(f"Labeled cell {lc.cell} outside the grid")
        index = grid.flat_index(lc.cell)
        labels[index] = int(lc.level)
        scores[index] = lc.score
    return CityMap(grid, labels, Provenance.OFFICIAL, city=city, scores=scores, **ids)


def predict_map(
    params: ModelParams,
    provider: TileProvider,
    grid: GridSpec,
    zoom: int = 17,
    size_px: int = 256,
    city: str = "city",
    cells: Optional[Sequence[CellId]] = None,
    workers: int = 8,
    max_failure_fraction: float = 0.01,
    **ids: Optional[str],
) -> CityMap:
    """
    Label cells by the argmax of the model on their centered tiles.

    Args:
        cells: Cells to predict, in any order; all grid cells when None
        max_failure_fraction: Abort when more tile fetches than this fail

    Raises:
        DatasetBuildError: If too many tiles could not be fetched
    """
    targets = list(grid.cells()) if cells is None else list(cells)
    labels = np.full(grid.n_cells, UNKNOWN, dtype=np.int8)
    scores = np.full(grid.n_cells, np.nan)
    input_shape = params.arch.input_shape
    failures: List[CellId] = []

    def load(cell: CellId) -> Optional[np.ndarray]:
        geom = TileGeometry(*cell_center(cell, grid), zoom=zoom, size_px=size_px)
        try:
            tile = provider.fetch(geom)
        except CrimeMapError as e:
            logger.warning(f"No tile for {cell}: {e}")
            return None
        return to_model_input(tile.pixels, input_shape)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for start in range(0, len(targets), PREDICT_CHUNK):
            chunk = targets[start : start + PREDICT_CHUNK]
            images = list(pool.map(load, chunk))
            ok = [i for i, image in enumerate(images) if image is not None]
            failures.extend(chunk[i] for i, image in enumerate(images) if image is None)
            if not ok:
                continue
            probs = predict(params, np.stack([images[i] for i in ok]))
            for i, p in zip(ok, probs):
                index = grid.flat_index(chunk[i])
                labels[index] = int(p.argmax())
                scores[index] = float(p.max())

    summary = {"cells": len(targets), "failed": len(failures)}
    logger.info(f"predict_summary {json.dumps(summary)}")
    if targets and len(failures) > max_failure_fraction * len(targets):
        raise DatasetBuildError(
            f"{len(failures)} of {len(targets)} tiles failed while predicting the map"
        )
    return CityMap(grid, labels, Provenance.PREDICTED, city=city, scores=scores, **ids)


@dataclass
class MapAgreement:
    """
    Agreement between two maps over cells known in both.

    Attributes:
        accuracy: Fraction of compared cells with equal labels
        confusion: 3x3 counts, rows = reference level, columns = predicted level
        per_label: For each reference level, the fraction predicted identically
            (None when the level never occurs among compared cells)
        compared: Number of cells known in both maps
    """

    accuracy: float
    confusion: np.ndarray
    per_label: Dict[str, Optional[float]] = field(default_factory=dict)
    compared: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_label": self.per_label,
            "compared": self.compared,
        }


def map_accuracy(predicted: CityMap, reference: CityMap) -> MapAgreement:
    """
    Raises:
        ShapeError: If the maps use different grids
        DegenerateInputError: If no cell is known in both maps
    """
    if predicted.grid != reference.grid:
        raise ShapeError("Maps cover different grids")
    both = (predicted.labels != UNKNOWN) & (reference.labels != UNKNOWN)
    compared = int(both.sum())
    if compared == 0:
        raise DegenerateInputError("No cell is labeled in both maps")
    pred = predicted.labels[both].astype(np.int64)
    ref = reference.labels[both].astype(np.int64)
    levels = [int(level) for level in CrimeLevel]
    confusion = confusion_matrix(ref, pred, labels=levels).astype(np.int64)
    per_label: Dict[str, Optional[float]] = {}
    for level in CrimeLevel:
        total = int(confusion[level].sum())
        hits = int(confusion[level, level])
        per_label[level.label] = None if total == 0 else hits / total
    return MapAgreement(
        accuracy=int(np.trace(confusion)) / compared,
        confusion=confusion,
        per_label=per_label,
        compared=compared,
    )


def _cell_feature(city_map: CityMap, index: int) -> geojson.Feature:
    cell = city_map.grid.cell_at(index)
    south, north, west, east = city_map.grid.cell_bounds(cell)
    ring = [(west, south), (east, south), (east, north), (west, north), (west, south)]
    properties: Dict[str, Any] = {
        "row": cell.row,
        "col": cell.col,
        "label": CrimeLevel(int(city_map.labels[index])).label,
    }
    if city_map.scores is not None and np.isfinite(city_map.scores[index]):
        properties["score"] = float(city_map.scores[index])
    return geojson.Feature(
        id=str(cell),
        geometry=geojson.Polygon([ring], precision=GEOJSON_PRECISION),
        properties=properties,
    )


def render_geojson(
    city_map: CityMap, level: Optional[CrimeLevel] = None
) -> geojson.FeatureCollection:
    """
    One Polygon feature per known cell (or per cell of ``level``).

    Rings run counter-clockwise from the south-west corner. The collection
    carries a ``crimemap`` foreign member with city, provenance, and config hash.
    """
    if level is None:
        selected = np.flatnonzero(city_map.labels != UNKNOWN)
    else:
        selected = np.flatnonzero(city_map.labels == int(level))
    features = [_cell_feature(city_map, int(i)) for i in selected]
    return geojson.FeatureCollection(
        features,
        crimemap={
            "city": city_map.city,
            "provenance": city_map.provenance.value,
            "config_hash": city_map.config_hash,
        },
    )


def render_png(
    city_map: CityMap,
    palette: Palette = DEFAULT_PALETTE,
    scale_px_per_cell: int = 1,
    level: Optional[CrimeLevel] = None,
) -> bytes:
    """
    RGBA PNG with one solid ``scale x scale`` block per cell, north at the top.

    Unknown cells (and, with ``level``, cells of other levels) are transparent.
    """
    if scale_px_per_cell < 1:
        raise ConfigError("scale_px_per_cell must be at least 1")
    grid_labels = city_map.as_grid()
    rgba = np.zeros((*grid_labels.shape, 4), dtype=np.uint8)
    for lvl in CrimeLevel:
        if level is not None and lvl != level:
            continue
        rgba[grid_labels == int(lvl)] = (*palette.color(lvl), 255)
    rgba = rgba[::-1]
    scale = scale_px_per_cell
    rgba = np.repeat(np.repeat(rgba, scale, axis=0), scale, axis=1)
    info = PngInfo()
    info.add_text("crimemap:city", city_map.city)
    info.add_text("crimemap:provenance", city_map.provenance.value)
    info.add_text("crimemap:config_hash", city_map.config_hash or "")
    buffer = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(buffer, format="PNG", pnginfo=info)
    return buffer.getvalue()


def read_png_labels(
    data: bytes, palette: Palette = DEFAULT_PALETTE, scale_px_per_cell: int = 1
) -> np.ndarray:
    """
    Recover the label grid from :func:`render_png` output.

    Returns:
        int8 array (n_rows, n_cols) with row 0 south; UNKNOWN where transparent

    Raises:
        ShapeError: If the image size or a block color does not fit the palette
    """
    with Image.open(io.BytesIO(data)) as image:
        rgba = np.asarray(image.convert("RGBA"))
    height, width, _ = rgba.shape
    if height % scale_px_per_cell or width % scale_px_per_cell:
        raise ShapeError(
            f"Image {width}x{height} is not a multiple of scale {scale_px_per_cell}"
        )
    blocks = rgba[::scale_px_per_cell, ::scale_px_per_cell][::-1]
    labels = np.full(blocks.shape[:2], UNKNOWN, dtype=np.int8)
    opaque = blocks[..., 3] > 0
    matched = ~opaque
    for lvl in CrimeLevel:
        hit = opaque & np.all(blocks[..., :3] == palette.color(lvl), axis=-1)
        labels[hit] = int(lvl)
        matched |= hit
    if not np.all(matched):
        raise ShapeError("Image contains colors outside the palette")
    return labels


def map_basename(city_map: CityMap, level: Optional[CrimeLevel] = None) -> str:
    suffix = "all" if level is None else level.label.lower()
    return f"{city_map.city}_{city_map.provenance.value}_{suffix}"


def write_map_layers(
    city_map: CityMap,
    out_dir: Union[str, Path],
    palette: Palette = DEFAULT_PALETTE,
    scale_px_per_cell: int = 4,
) -> List[Path]:
    """Write the combined map and one layer per level as GeoJSON and PNG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for level in (None, *CrimeLevel):
        base = map_basename(city_map, level)
        collection = render_geojson(city_map, level)
        geojson_path = out / f"{base}.geojson"
        with open(geojson_path, "w", encoding="utf-8") as f:
            geojson.dump(collection, f, sort_keys=True, indent=1)
        png_path = out / f"{base}.png"
        png_path.write_bytes(render_png(city_map, palette, scale_px_per_cell, level))
        written += [geojson_path, png_path]
    logger.info(f"Wrote {len(written)} map layers for {city_map.city} to {out}")
    return written
