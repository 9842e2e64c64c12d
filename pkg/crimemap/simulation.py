"""
Seeded synthetic cities.

A planted intensity field (a low background plus Gaussian hotspots) gives
each cell an expected crime count; Poisson draws from that field become
reports placed uniformly inside their cells. Non-violent categories are mixed
in so the category filter has something to remove.
"""

import logging
from dataclasses import dataclass
from datetime import date, time, timedelta
from typing import List, Optional, Tuple

import numpy as np

from .geo import CellId, GridSpec
from .ingest import CrimeReport

logger = logging.getLogger(__name__)

VIOLENT_CATEGORIES = (
    "Homicide",
    "Assault",
    "Battery",
    "Robbery",
    "Arson",
    "Kidnapping",
)
NONVIOLENT_CATEGORIES = ("Fraud", "Bribery", "Theft", "Vandalism")

_FIRST_DAY = date(2012, 2, 1)
_DAY_SPAN = 4 * 365


@dataclass(frozen=True)
class Hotspot:
    """Gaussian bump in the planted field, in cell units."""

    row: float
    col: float
    sigma: float
    peak: float


@dataclass(frozen=True)
class CityLayout:
    """Parameters of a synthetic city."""

    background: float = 0.3
    n_hotspots: int = 6
    sigma_range: Tuple[float, float] = (2.0, 5.0)
    peak_range: Tuple[float, float] = (20.0, 60.0)
    nonviolent_fraction: float = 0.25


def plant_hotspots(grid: GridSpec, seed: int, layout: CityLayout) -> List[Hotspot]:
    rng = np.random.default_rng(seed)
    return [
        Hotspot(
            row=float(rng.uniform(0, grid.n_rows)),
            col=float(rng.uniform(0, grid.n_cols)),
            sigma=float(rng.uniform(*layout.sigma_range)),
            peak=float(rng.uniform(*layout.peak_range)),
        )
        for _ in range(layout.n_hotspots)
    ]


def planted_intensity(
    grid: GridSpec, seed: int, layout: Optional[CityLayout] = None
) -> np.ndarray:
    """Expected violent-crime count per cell, shape (n_rows, n_cols)."""
    layout = layout or CityLayout()
    rows, cols = np.mgrid[0 : grid.n_rows, 0 : grid.n_cols].astype(np.float64)
    field = np.full(rows.shape, layout.background)
    for spot in plant_hotspots(grid, seed, layout):
        dist2 = (rows + 0.5 - spot.row) ** 2 + (cols + 0.5 - spot.col) ** 2
        field += spot.peak * np.exp(-dist2 / (2 * spot.sigma**2))
    return field


def synth_reports(
    grid: GridSpec, seed: int, layout: Optional[CityLayout] = None
) -> List[CrimeReport]:
    """
    Draw reports from the planted field.

    Violent counts follow the field; non-violent reports are spread uniformly
    over the city at ``nonviolent_fraction`` of the violent total.
    """
    layout = layout or CityLayout()
    intensity = planted_intensity(grid, seed, layout)
    rng = np.random.default_rng([seed, 1])
    counts = rng.poisson(intensity)

    placements: List[Tuple[CellId, str]] = []
    for row in range(grid.n_rows):
        for col in range(grid.n_cols):
            for _ in range(int(counts[row, col])):
                pick = int(rng.integers(len(VIOLENT_CATEGORIES)))
                placements.append((CellId(row, col), VIOLENT_CATEGORIES[pick]))
    n_nonviolent = int(round(len(placements) * layout.nonviolent_fraction))
    for _ in range(n_nonviolent):
        cell = CellId(int(rng.integers(grid.n_rows)), int(rng.integers(grid.n_cols)))
        category = NONVIOLENT_CATEGORIES[int(rng.integers(len(NONVIOLENT_CATEGORIES)))]
        placements.append((cell, category))

    reports = []
    for number, index in enumerate(rng.permutation(len(placements)), start=1):
        cell, category = placements[int(index)]
        bounds = grid.cell_bounds(cell)
        # Stay strictly inside the cell so edge rules never move a report.
        lat_span = bounds.lat_max - bounds.lat_min
        lon_span = bounds.lon_max - bounds.lon_min
        lat = bounds.lat_min + lat_span * rng.uniform(0.05, 0.95)
        lon = bounds.lon_min + lon_span * rng.uniform(0.05, 0.95)
        minutes = int(rng.integers(24 * 60))
        reports.append(
            CrimeReport(
                report_id=str(number),
                date=_FIRST_DAY + timedelta(days=int(rng.integers(_DAY_SPAN))),
                time=time(minutes // 60, minutes % 60),
                latitude=round(float(lat), 7),
                longitude=round(float(lon), 7),
                category=category,
            )
        )
    logger.info(
        f"Synthesized {len(reports)} reports ({n_nonviolent} non-violent) "
        f"over a {grid.n_rows}x{grid.n_cols} grid"
    )
    return reports
