"""
Pytest configuration and shared fixtures.

Provides small grids, labeled cells with synthetic tiles, tiny model
parameters, and HTTP mocking for the tile client.
"""

from pathlib import Path
from typing import Callable, Generator, List, Tuple

import numpy as np
import pytest
import responses

from crimemap.geo import CellId, GridSpec
from crimemap.imagery import SyntheticTileProvider, TileDataset, build_dataset, load_dataset
from crimemap.labeling import CrimeLevel, LabeledCell
from crimemap.model import PRESETS, ModelParams, init_params

CHICAGO = (41.8781, -87.6298)


@pytest.fixture
def small_grid() -> GridSpec:
    """A 4x4 grid of 30 m cells around downtown Chicago."""
    return GridSpec.around(*CHICAGO, n_rows=4, n_cols=4)


@pytest.fixture
def striped_labels(small_grid: GridSpec) -> List[LabeledCell]:
    """Every cell labeled by column: levels cycle Low, Neutral, High."""
    return [
        LabeledCell(cell, cell.col, CrimeLevel(cell.col % 3))
        for cell in small_grid.cells()
    ]


@pytest.fixture
def synthetic_provider(
    small_grid: GridSpec, striped_labels: List[LabeledCell]
) -> SyntheticTileProvider:
    return SyntheticTileProvider(
        small_grid, {c.cell: c.level for c in striped_labels}, seed=0
    )


@pytest.fixture
def make_labeled_grid() -> Callable[[int, int], Tuple[GridSpec, List[LabeledCell]]]:
    """Factory for an n x n grid whose cells carry seeded random levels."""

    def _make(n: int, seed: int = 0) -> Tuple[GridSpec, List[LabeledCell]]:
        grid = GridSpec.around(*CHICAGO, n_rows=n, n_cols=n)
        rng = np.random.default_rng(seed)
        levels = rng.integers(0, 3, size=grid.n_cells)
        cells = [
            LabeledCell(CellId(*divmod(i, n)), int(level), CrimeLevel(int(level)))
            for i, level in enumerate(levels)
        ]
        return grid, cells

    return _make


@pytest.fixture
def tiny_dataset(tmp_path: Path, make_labeled_grid) -> TileDataset:
    """Synthetic 64 px tiles for a 10x10 grid, loaded at the tiny input shape."""
    grid, cells = make_labeled_grid(10, 3)
    provider = SyntheticTileProvider(grid, {c.cell: c.level for c in cells}, seed=0)
    manifest = build_dataset(cells, provider, grid, tmp_path / "dataset", size_px=64)
    return load_dataset(manifest, PRESETS["tiny"].input_shape)


@pytest.fixture
def tiny_params() -> ModelParams:
    return init_params(PRESETS["tiny"], seed=0)


@pytest.fixture
def mock_responses() -> Generator[responses.RequestsMock, None, None]:
    """Provide a responses mock for HTTP requests."""
    with responses.RequestsMock() as rsps:
        yield rsps
