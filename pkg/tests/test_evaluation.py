"""
Tests for stratified splits, accuracy, confusion matrices, and cross-validation.
"""

import json

import numpy as np
import pytest

from crimemap.errors import ConfigError, DegenerateInputError, ShapeError, TrainingError
from crimemap.evaluation import (
    EvalReport,
    SplitSpec,
    accuracy,
    confusion,
    cross_validate,
    split,
    split_indices,
    train_and_classify,
    write_eval_report,
)
from crimemap.geo import CellId
from crimemap.imagery import (
    DatasetManifest,
    ManifestEntry,
    SyntheticTileProvider,
    TileDataset,
    build_dataset,
)
from crimemap.labeling import CrimeLevel
from crimemap.model import PRESETS, TrainConfig

BALANCED_300 = [0] * 100 + [1] * 100 + [2] * 100


def _entries(labels):
    return [
        ManifestEntry(CellId(i, 0), 41.0, -87.0, 17, CrimeLevel(level), f"tiles/r{i}c0.png")
        for i, level in enumerate(labels)
    ]


def _dataset(labels) -> TileDataset:
    images = np.zeros((len(labels), 1, 1, 3), dtype=np.float32)
    return TileDataset(images, np.asarray(labels, dtype=np.int64), _entries(labels))


class TestSplitSpec:
    """Test split configuration."""

    @pytest.mark.parametrize("kwargs", [{"test_fraction": 0.0}, {"test_fraction": 1.0}, {"repeats": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SplitSpec(**kwargs)

    def test_defaults(self):
        assert SplitSpec().to_dict() == {"test_fraction": 0.05, "repeats": 3, "seed": 0}


class TestSplitIndices:
    """Test stratified splitting."""

    def test_sizes_and_stratification(self):
        splits = split_indices(BALANCED_300, SplitSpec())
        assert len(splits) == 3
        labels = np.array(BALANCED_300)
        for train_idx, test_idx in splits:
            assert len(test_idx) == 15
            assert len(train_idx) == 285
            assert np.bincount(labels[test_idx]).tolist() == [5, 5, 5]
            assert not set(train_idx) & set(test_idx)
            assert sorted([*train_idx, *test_idx]) == list(range(300))

    def test_half_rounds_up(self):
        labels = [0] * 30 + [1] * 30 + [2] * 30
        train_idx, test_idx = split_indices(labels, SplitSpec(repeats=1))[0]
        assert len(test_idx) == 6

    def test_deterministic(self):
        a = split_indices(BALANCED_300, SplitSpec(seed=4))
        b = split_indices(BALANCED_300, SplitSpec(seed=4))
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_repeats_and_seeds_differ(self):
        splits = split_indices(BALANCED_300, SplitSpec(seed=4))
        assert not np.array_equal(splits[0][1], splits[1][1])
        other = split_indices(BALANCED_300, SplitSpec(seed=5))
        assert not np.array_equal(splits[0][1], other[0][1])

    def test_too_few_entries(self):
        with pytest.raises(DegenerateInputError):
            split_indices([0, 1, 2] * 6, SplitSpec())

    def test_class_too_small_to_hold_out(self):
        with pytest.raises(DegenerateInputError, match="High"):
            split_indices([0] * 50 + [1] * 50 + [2] * 3, SplitSpec())

    def test_manifest_split(self, tmp_path):
        manifest = DatasetManifest(tmp_path, _entries(BALANCED_300))
        pairs = split(manifest, SplitSpec(repeats=2))
        assert len(pairs) == 2
        train_part, test_part = pairs[0]
        assert (len(train_part), len(test_part)) == (285, 15)
        assert not {e.cell for e in train_part.entries} & {e.cell for e in test_part.entries}


class TestAccuracyAndConfusion:
    """Test the evaluation metrics."""

    def test_accuracy(self):
        assert accuracy([0, 1, 2, 1], [0, 1, 1, 1]) == 0.75
        assert accuracy([2, 2], [2, 2]) == 1.0

    def test_confusion_rows_are_truth(self):
        matrix = confusion([0, 1, 2, 1], [0, 1, 1, 1])
        assert matrix.tolist() == [[1, 0, 0], [0, 2, 1], [0, 0, 0]]
        assert matrix.sum() == 4

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            accuracy([0, 1], [0])

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            accuracy([], [])

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            confusion([3], [0])


class TestEvalReport:
    """Test report rendering."""

    report = EvalReport([0.8, 0.9, 1.0], np.array([[5, 0, 0], [1, 4, 0], [0, 0, 5]]), [5, 5, 5], "abc")

    def test_mean(self):
        assert self.report.mean_accuracy == pytest.approx(0.9)

    def test_text(self):
        text = self.report.to_text()
        assert "split 1: accuracy 0.9000 on 5 examples" in text
        assert "mean accuracy: 0.9000" in text
        assert "config hash: abc" in text

    def test_write(self, tmp_path):
        paths = write_eval_report(self.report, tmp_path)
        assert [p.name for p in paths] == ["eval_report.txt", "eval_report.json"]
        data = json.loads((tmp_path / "eval_report.json").read_text())
        assert data["confusion"] == [5, 0, 0, 1, 4, 0, 0, 0, 5]
        assert data["labels"] == ["Low", "Neutral", "High"]
        assert data["mean_accuracy"] == pytest.approx(0.9)


class TestCrossValidate:
    """Test the split-train-evaluate loop."""

    def test_constant_model_scores_one_third(self):
        def always_low(train_set, test_set, seed):
            return np.zeros(len(test_set), dtype=np.int64)

        report = cross_validate(_dataset(BALANCED_300), SplitSpec(), TrainConfig(), fit_predict=always_low)
        assert report.split_accuracies == pytest.approx([1 / 3] * 3)
        assert report.test_sizes == [15, 15, 15]
        assert report.confusion[:, 0].tolist() == [15, 15, 15]

    def test_split_seeds(self):
        seeds = []

        def perfect(train_set, test_set, seed):
            seeds.append(seed)
            assert len(train_set) == 285
            return test_set.labels.copy()

        report = cross_validate(
            _dataset(BALANCED_300), SplitSpec(seed=10), TrainConfig(), fit_predict=perfect
        )
        assert seeds == [10, 11, 12]
        assert report.mean_accuracy == 1.0

    def test_training_error_names_split(self):
        calls = []

        def fails_second(train_set, test_set, seed):
            calls.append(seed)
            if len(calls) == 2:
                raise TrainingError("weights diverged", last_params="checkpoint")
            return test_set.labels.copy()

        with pytest.raises(TrainingError) as excinfo:
            cross_validate(_dataset(BALANCED_300), SplitSpec(), TrainConfig(), fit_predict=fails_second)
        assert excinfo.value.split_index == 1
        assert excinfo.value.last_params == "checkpoint"
        assert str(excinfo.value).startswith("split 1:")

    def test_trains_real_model(self, tiny_dataset):
        fit_predict = train_and_classify(PRESETS["tiny"], TrainConfig(iterations=20))
        report = cross_validate(
            tiny_dataset, SplitSpec(repeats=2), TrainConfig(), fit_predict=fit_predict, config_hash="h"
        )
        assert len(report.split_accuracies) == 2
        assert all(0.0 <= acc <= 1.0 for acc in report.split_accuracies)
        assert report.confusion.sum() == sum(report.test_sizes)
        assert report.config_hash == "h"

    def test_loads_manifest(self, tmp_path, make_labeled_grid):
        grid, cells = make_labeled_grid(8, 2)
        provider = SyntheticTileProvider(grid, {c.cell: c.level for c in cells}, seed=0)
        manifest = build_dataset(cells, provider, grid, tmp_path / "ds", size_px=64)

        def perfect(train_set, test_set, seed):
            assert train_set.images.shape[1:] == (16, 16, 3)
            return test_set.labels.copy()

        spec = SplitSpec(test_fraction=0.2, repeats=1)
        report = cross_validate(
            manifest, spec, TrainConfig(), arch=PRESETS["tiny"], fit_predict=perfect
        )
        assert report.mean_accuracy == 1.0
