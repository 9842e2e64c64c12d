"""
Tests for synthetic cities.
"""

import io

import numpy as np

from crimemap.geo import GridSpec, cell_index
from crimemap.ingest import CategoryPolicy, ColumnMapping, filter_violent, parse_reports, write_reports_csv
from crimemap.labeling import fit_bins, score_regions
from crimemap.simulation import (
    NONVIOLENT_CATEGORIES,
    VIOLENT_CATEGORIES,
    CityLayout,
    planted_intensity,
    synth_reports,
)


class TestPlantedIntensity:
    """Test the planted crime field."""

    def test_shape_and_floor(self, small_grid):
        field = planted_intensity(small_grid, seed=1)
        assert field.shape == (4, 4)
        assert np.all(field >= CityLayout().background)

    def test_seed_changes_layout(self):
        grid = GridSpec.around(41.8781, -87.6298, 20, 20)
        assert not np.allclose(planted_intensity(grid, 1), planted_intensity(grid, 2))


class TestSynthReports:
    """Test synthetic report generation."""

    def test_deterministic(self, small_grid):
        assert synth_reports(small_grid, 5) == synth_reports(small_grid, 5)

    def test_reports_fall_inside_grid(self, small_grid):
        for report in synth_reports(small_grid, 5):
            assert cell_index(report.latitude, report.longitude, small_grid) is not None

    def test_categories_are_mixed(self):
        grid = GridSpec.around(41.8781, -87.6298, 10, 10)
        reports = synth_reports(grid, 3)
        categories = {r.category for r in reports}
        assert categories & set(VIOLENT_CATEGORIES)
        assert categories & set(NONVIOLENT_CATEGORIES)
        violent = filter_violent(reports, CategoryPolicy())
        assert 0 < len(violent) < len(reports)
        assert all(r.category in VIOLENT_CATEGORIES for r in violent)

    def test_csv_round_trip_through_ingest(self, small_grid):
        reports = synth_reports(small_grid, 8)
        buffer = io.StringIO()
        write_reports_csv(reports, buffer, ColumnMapping())
        parsed, errors = parse_reports(io.StringIO(buffer.getvalue()), ColumnMapping())
        assert errors == []
        assert parsed == reports

    def test_scores_support_three_levels(self):
        """Test a 40x40 city has enough distinct scores to bin into three levels."""
        grid = GridSpec.around(41.8781, -87.6298, 40, 40)
        violent = filter_violent(synth_reports(grid, 11), CategoryPolicy())
        scores = [cs.score for cs in score_regions(violent, grid).cells]
        model = fit_bins(scores, "kmeans", seed=0)
        levels = model.levels_for(np.asarray(scores))
        assert set(levels.tolist()) == {0, 1, 2}
