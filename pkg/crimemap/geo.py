"""
Web-Mercator math and square-grid discretization of a city bounding box.

Cells are laid out in a local equirectangular metric anchored at the bbox
center latitude: one cell spans ``cell_side_m`` meters north-south and
east-west at that latitude. Row 0 is the southernmost row, column 0 the
westernmost. Cells are half-open on their lower edges; the bbox's north and
east edges belong to the last row and column, and the last row and column are
clipped to the bbox.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import GeoRangeError

EARTH_CIRCUMFERENCE_M = 40075016.686
MERCATOR_MAX_LAT = 85.05113
TILE_BASE_PX = 256
MIN_ZOOM = 0
MAX_ZOOM = 22

# Meters per degree of latitude on the spherical Web-Mercator earth.
METERS_PER_DEGREE = EARTH_CIRCUMFERENCE_M / 360.0


class BoundingBox(NamedTuple):
    """Geographic bounding box in degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @property
    def center(self) -> Tuple[float, float]:
        return (
            (self.lat_min + self.lat_max) / 2.0,
            (self.lon_min + self.lon_max) / 2.0,
        )

    def contains(self, lat: float, lon: float) -> bool:
        """Closed containment test."""
        return (
            self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max
        )


class CellId(NamedTuple):
    """Row/column index of a grid cell."""

    row: int
    col: int

    def __str__(self) -> str:
        return f"r{self.row}c{self.col}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        """Parse the ``r{row}c{col}`` form used in file names."""
        if not text.startswith("r") or "c" not in text:
            raise GeoRangeError(f"Invalid cell id: {text!r}")
        row_text, col_text = text[1:].split("c", 1)
        try:
            return cls(int(row_text), int(col_text))
        except ValueError as e:
            raise GeoRangeError(f"Invalid cell id: {text!r}") from e


def latlon_to_world(lat: float, lon: float) -> Tuple[float, float]:
    """
    Project WGS84 degrees to normalized Web-Mercator coordinates.

    Returns:
        (x, y) in [0, 1]², x growing east and y growing south

    Raises:
        GeoRangeError: If latitude is beyond the Mercator limit
    """
    if abs(lat) > MERCATOR_MAX_LAT:
        raise GeoRangeError(
            f"Latitude {lat} is beyond the Web-Mercator limit of ±{MERCATOR_MAX_LAT}"
        )
    if not -180.0 <= lon <= 180.0:
        raise GeoRangeError(f"Longitude {lon} outside [-180, 180]")
    x = (lon + 180.0) / 360.0
    y = (1.0 - math.asinh(math.tan(math.radians(lat))) / math.pi) / 2.0
    return x, y


def world_to_latlon(x: float, y: float) -> Tuple[float, float]:
    """Inverse of :func:`latlon_to_world`."""
    lon = x * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y))))
    return lat, lon


def _check_zoom(zoom: int) -> None:
    if isinstance(zoom, bool) or not isinstance(zoom, (int, np.integer)):
        raise GeoRangeError(f"Zoom must be an integer, got {zoom!r}")
    if not MIN_ZOOM <= zoom <= MAX_ZOOM:
        raise GeoRangeError(f"Zoom {zoom} outside [{MIN_ZOOM}, {MAX_ZOOM}]")


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters covered by one pixel at the given latitude and zoom."""
    _check_zoom(zoom)
    return (
        EARTH_CIRCUMFERENCE_M
        / TILE_BASE_PX
        * math.cos(math.radians(lat))
        / (2**zoom)
    )


@dataclass(frozen=True)
class TileGeometry:
    """A square image centered on a point at a given zoom."""

    center_lat: float
    center_lon: float
    zoom: int
    size_px: int = TILE_BASE_PX

    def __post_init__(self) -> None:
        _check_zoom(self.zoom)
        if self.size_px <= 0:
            raise GeoRangeError(f"Tile size must be positive, got {self.size_px}")
        if abs(self.center_lat) > MERCATOR_MAX_LAT:
            raise GeoRangeError(f"Tile center latitude {self.center_lat} out of range")

    @property
    def cache_key(self) -> Tuple[int, str, str, int]:
        """Key identifying the tile: zoom, 7-decimal lat/lon, size."""
        return (
            self.zoom,
            f"{self.center_lat:.7f}",
            f"{self.center_lon:.7f}",
            self.size_px,
        )


def footprint_side_m(geom: TileGeometry) -> float:
    """Physical side length of a tile, in meters."""
    return geom.size_px * ground_resolution(geom.center_lat, geom.zoom)


def tile_footprint(geom: TileGeometry) -> BoundingBox:
    """Geographic bounding box covered by a tile."""
    cx, cy = latlon_to_world(geom.center_lat, geom.center_lon)
    half = geom.size_px / 2.0 / (TILE_BASE_PX * 2**geom.zoom)
    north, west = world_to_latlon(cx - half, cy - half)
    south, east = world_to_latlon(cx + half, cy + half)
    return BoundingBox(south, north, west, east)


@dataclass(frozen=True)
class GridSpec:
    """
    Square grid over a city bounding box.

    Attributes:
        lat_min, lat_max, lon_min, lon_max: Bounding box in degrees
        cell_side_m: Cell side in meters (900 m² cells by default)
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_side_m: float = 30.0

    def __post_init__(self) -> None:
        if not self.lat_min < self.lat_max:
            raise GeoRangeError("Grid requires lat_min < lat_max")
        if not self.lon_min < self.lon_max:
            raise GeoRangeError("Grid requires lon_min < lon_max")
        if not self.cell_side_m > 0:
            raise GeoRangeError("Grid requires cell_side_m > 0")
        if self.lat_min < -MERCATOR_MAX_LAT or self.lat_max > MERCATOR_MAX_LAT:
            raise GeoRangeError("Grid latitude outside the Web-Mercator range")
        if self.lon_min < -180.0 or self.lon_max > 180.0:
            raise GeoRangeError("Grid longitude outside [-180, 180]")

    @property
    def bbox(self) -> BoundingBox:
        return BoundingBox(self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    @property
    def lat_step(self) -> float:
        """Cell height in degrees."""
        return self.cell_side_m / METERS_PER_DEGREE

    @property
    def lon_step(self) -> float:
        """Cell width in degrees at the bbox center latitude."""
        center_lat = (self.lat_min + self.lat_max) / 2.0
        meters = METERS_PER_DEGREE * math.cos(math.radians(center_lat))
        return self.cell_side_m / meters

    @property
    def n_rows(self) -> int:
        return max(1, math.ceil((self.lat_max - self.lat_min) / self.lat_step))

    @property
    def n_cols(self) -> int:
        return max(1, math.ceil((self.lon_max - self.lon_min) / self.lon_step))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def flat_index(self, cell: CellId) -> int:
        """Row-major position of a cell."""
        return cell.row * self.n_cols + cell.col

    def cell_at(self, index: int) -> CellId:
        """Inverse of :meth:`flat_index`."""
        return CellId(index // self.n_cols, index % self.n_cols)

    def cells(self) -> List[CellId]:
        """All cells in row-major order."""
        return [CellId(r, c) for r in range(self.n_rows) for c in range(self.n_cols)]

    def contains_cell(self, cell: CellId) -> bool:
        return 0 <= cell.row < self.n_rows and 0 <= cell.col < self.n_cols

    def lat_edge(self, row: int) -> float:
        """Southern edge of ``row``, clipped to the bbox."""
        return min(self.lat_min + row * self.lat_step, self.lat_max)

    def lon_edge(self, col: int) -> float:
        """Western edge of ``col``, clipped to the bbox."""
        return min(self.lon_min + col * self.lon_step, self.lon_max)

    def cell_bounds(self, cell: CellId) -> BoundingBox:
        """Rectangle of a cell (clipped to the bbox)."""
        if not self.contains_cell(cell):
            raise GeoRangeError(f"Cell {cell} outside {self.n_rows}x{self.n_cols} grid")
        return BoundingBox(
            self.lat_edge(cell.row),
            self.lat_edge(cell.row + 1),
            self.lon_edge(cell.col),
            self.lon_edge(cell.col + 1),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        return cls(
            lat_min=float(data["lat_min"]),
            lat_max=float(data["lat_max"]),
            lon_min=float(data["lon_min"]),
            lon_max=float(data["lon_max"]),
            cell_side_m=float(data.get("cell_side_m", 30.0)),
        )

    @classmethod
    def around(
        cls,
        center_lat: float,
        center_lon: float,
        n_rows: int,
        n_cols: int,
        cell_side_m: float = 30.0,
    ) -> "GridSpec":
        """Grid of exactly ``n_rows`` by ``n_cols`` cells centered on a point."""
        half_lat = n_rows * cell_side_m / METERS_PER_DEGREE / 2.0
        # The lon step depends on the center latitude, which is fixed here.
        lon_step = cell_side_m / (
            METERS_PER_DEGREE * math.cos(math.radians(center_lat))
        )
        half_lon = n_cols * lon_step / 2.0
        # Shrink by a hair so float rounding never adds a sliver row/col.
        shrink = 1e-9
        return cls(
            lat_min=center_lat - half_lat * (1 - shrink),
            lat_max=center_lat + half_lat * (1 - shrink),
            lon_min=center_lon - half_lon * (1 - shrink),
            lon_max=center_lon + half_lon * (1 - shrink),
            cell_side_m=cell_side_m,
        )


def _axis_index(
    value: np.ndarray, origin: float, step: float, count: int, upper: float
) -> np.ndarray:
    """Index along one axis, corrected so it agrees with the edge comparisons."""
    idx = np.floor((value - origin) / step).astype(np.int64)
    idx = np.clip(idx, 0, count - 1)
    low_edge = np.minimum(origin + idx * step, upper)
    high_edge = np.minimum(origin + (idx + 1) * step, upper)
    idx = np.where((value < low_edge) & (idx > 0), idx - 1, idx)
    idx = np.where((value >= high_edge) & (idx < count - 1), idx + 1, idx)
    return idx


def cell_indices(
    lats: np.ndarray, lons: np.ndarray, grid: GridSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized :func:`cell_index`.

    Returns:
        (rows, cols, inside) arrays; rows/cols are meaningless where not inside
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    inside = (
        (lats >= grid.lat_min)
        & (lats <= grid.lat_max)
        & (lons >= grid.lon_min)
        & (lons <= grid.lon_max)
    )
    rows = _axis_index(lats, grid.lat_min, grid.lat_step, grid.n_rows, grid.lat_max)
    cols = _axis_index(lons, grid.lon_min, grid.lon_step, grid.n_cols, grid.lon_max)
    return rows, cols, inside


def cell_index(lat: float, lon: float, grid: GridSpec) -> Optional[CellId]:
    """
    Cell containing a point.

    Returns:
        The CellId, or None when the point lies outside the bbox
    """
    rows, cols, inside = cell_indices(np.array([lat]), np.array([lon]), grid)
    if not inside[0]:
        return None
    return CellId(int(rows[0]), int(cols[0]))


def cell_center(cell: CellId, grid: GridSpec) -> Tuple[float, float]:
    """Midpoint of a cell's (clipped) rectangle."""
    return grid.cell_bounds(cell).center
