"""
Deterministic synthetic satellite tiles.

Low-crime cells look like leafy residential blocks (green with tree blobs and
a few rooftops), high-crime cells like highways and parking lots (gray with
lane markings and cars), neutral cells mix both on a tan background. Per-pixel
noise and jitter keep the mapping learnable but not trivial.
"""

import logging
from typing import Mapping, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..errors import FetchError
from ..geo import CellId, GridSpec, TileGeometry, cell_index
from ..labeling import CrimeLevel
from .tiles import ImageTile, TileSource

logger = logging.getLogger(__name__)

RGB = Tuple[int, int, int]

_BACKGROUND = {
    CrimeLevel.LOW: (72, 124, 58),
    CrimeLevel.NEUTRAL: (158, 142, 112),
    CrimeLevel.HIGH: (106, 106, 110),
}
_TREE_COLORS: Tuple[RGB, ...] = ((38, 92, 40), (92, 148, 72), (55, 110, 48))
_ROOF_COLORS: Tuple[RGB, ...] = ((150, 88, 70), (182, 172, 160), (120, 100, 90))
_CAR_COLORS: Tuple[RGB, ...] = (
    (200, 30, 30),
    (230, 230, 230),
    (20, 20, 30),
    (40, 70, 160),
)
_LANE_COLORS: Tuple[RGB, ...] = ((235, 235, 235), (230, 200, 60))
_NOISE = 18
_JITTER = 10


def _pick(rng: np.random.Generator, colors: Tuple[RGB, ...]) -> RGB:
    return colors[int(rng.integers(len(colors)))]


def _trees(
    draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int, count: int
) -> None:
    for _ in range(count):
        radius = rng.uniform(0.03, 0.08) * size
        x, y = rng.uniform(0, size, 2)
        box = [x - radius, y - radius, x + radius, y + radius]
        draw.ellipse(box, fill=_pick(rng, _TREE_COLORS))


def _roofs(
    draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int, count: int
) -> None:
    for _ in range(count):
        w, h = rng.uniform(0.06, 0.14, 2) * size
        x, y = rng.uniform(0, size * 0.9, 2)
        draw.rectangle([x, y, x + w, y + h], fill=_pick(rng, _ROOF_COLORS))


def _road(draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int) -> None:
    width = max(2, int(size * rng.uniform(0.08, 0.14)))
    offset = rng.uniform(0.15, 0.85) * size
    lane = max(1, size // 128)
    if rng.random() < 0.5:
        ends = [(0, offset), (size, offset)]
    else:
        ends = [(offset, 0), (offset, size)]
    draw.line(ends, fill=(96, 96, 100), width=width)
    draw.line(ends, fill=_pick(rng, _LANE_COLORS), width=lane)


def _lanes(
    draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int, count: int
) -> None:
    for _ in range(count):
        x0, y0, x1, y1 = rng.uniform(0, size, 4)
        if rng.random() < 0.5:
            y1 = y0
        else:
            x1 = x0
        draw.line(
            [(x0, y0), (x1, y1)],
            fill=_pick(rng, _LANE_COLORS),
            width=max(1, size // 96),
        )


def _parking(draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int) -> None:
    stall = max(3, size // 24)
    x0, y0 = rng.uniform(0, size * 0.5, 2)
    for i in range(int(rng.integers(4, 10))):
        x = x0 + i * stall
        draw.line([(x, y0), (x, y0 + 2 * stall)], fill=(235, 235, 235), width=1)
        if rng.random() < 0.6:
            draw.rectangle(
                [x + 1, y0 + 2, x + stall - 2, y0 + 2 * stall - 2],
                fill=_pick(rng, _CAR_COLORS),
            )


def synth_tile(
    cell: CellId, level: CrimeLevel, seed: int, geom: TileGeometry
) -> ImageTile:
    """Render the synthetic tile for a cell; identical inputs give identical bytes."""
    rng = np.random.default_rng([seed, cell.row, cell.col, int(level), geom.size_px])
    size = geom.size_px
    area = (size / 256.0) ** 2
    image = Image.new("RGB", (size, size), _BACKGROUND[level])
    draw = ImageDraw.Draw(image)

    if level == CrimeLevel.LOW:
        _trees(draw, rng, size, max(1, int(rng.integers(18, 30) * area)))
        _roofs(draw, rng, size, int(rng.integers(1, 4)))
    elif level == CrimeLevel.HIGH:
        for _ in range(int(rng.integers(1, 3))):
            _road(draw, rng, size)
        _lanes(draw, rng, size, int(rng.integers(4, 9)))
        _parking(draw, rng, size)
        _roofs(draw, rng, size, int(rng.integers(0, 2)))
    else:
        _trees(draw, rng, size, max(1, int(rng.integers(5, 10) * area)))
        _roofs(draw, rng, size, int(rng.integers(5, 10)))
        _road(draw, rng, size)

    pixels = np.asarray(image, dtype=np.int16)
    pixels = pixels + int(rng.integers(-_JITTER, _JITTER + 1))
    pixels = pixels + rng.integers(-_NOISE, _NOISE + 1, size=pixels.shape)
    return ImageTile(
        np.clip(pixels, 0, 255).astype(np.uint8), geom, TileSource.SYNTHETIC
    )


class SyntheticTileProvider:
    """
    Offline provider: renders the tile of whichever labeled cell contains the
    requested center.
    """

    def __init__(
        self, grid: GridSpec, labels: Mapping[CellId, CrimeLevel], seed: int = 0
    ) -> None:
        self.grid = grid
        self.labels = dict(labels)
        self.seed = seed

    def fetch(self, geom: TileGeometry) -> ImageTile:
        cell = cell_index(geom.center_lat, geom.center_lon, self.grid)
        if cell is None or cell not in self.labels:
            raise FetchError(
                f"synthetic://{geom.center_lat:.7f},{geom.center_lon:.7f}",
                message=f"No synthetic ground truth at {geom.center_lat:.7f},"
                f"{geom.center_lon:.7f}",
            )
        return synth_tile(cell, self.labels[cell], self.seed, geom)
