"""
Held-out evaluation: stratified random splits, accuracy, and confusion matrices.

The protocol trains on the large side of each split and reports accuracy on
the small held-out side, repeated over several seeded splits.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix

from .errors import ConfigError, DegenerateInputError, ShapeError, TrainingError
from .imagery.dataset import DatasetManifest, TileDataset, load_dataset
from .labeling import CrimeLevel
from .model import PRESETS, ArchSpec, TrainConfig, classify, init_params, train

logger = logging.getLogger(__name__)

MIN_SPLIT_ENTRIES = 20
N_CLASSES = len(CrimeLevel)

# (train set, test set, seed) -> predicted labels for the test set
FitPredict = Callable[[TileDataset, TileDataset, int], np.ndarray]


@dataclass(frozen=True)
class SplitSpec:
    """
    Attributes:
        test_fraction: Share of each class held out for testing
        repeats: Number of independent splits
        seed: Base seed; split ``i`` uses ``[seed, i]``
    """

    test_fraction: float = 0.05
    repeats: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.test_fraction < 1:
            raise ConfigError("split.test_fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise ConfigError("split.repeats must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitSpec":
        return cls(**data)


def split_indices(
    labels: Sequence[int], spec: SplitSpec
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Stratified train/test index pairs, one per repeat.

    Each class contributes round(test_fraction * class size) shuffled members
    to the test side.

    Raises:
        DegenerateInputError: With fewer than 20 entries, or when a class
            would put none or all of its members in the test set
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < MIN_SPLIT_ENTRIES:
        raise DegenerateInputError(
            f"Need at least {MIN_SPLIT_ENTRIES} entries to split, got {len(labels)}"
        )
    splits = []
    for repeat in range(spec.repeats):
        rng = np.random.default_rng([spec.seed, repeat])
        test_parts = []
        for cls in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == cls))
            n_test = int(np.floor(spec.test_fraction * len(members) + 0.5))
            if n_test == 0 or n_test == len(members):
                raise DegenerateInputError(
                    f"Class {CrimeLevel(int(cls)).label} has {len(members)} entries, "
                    f"too few to hold out {spec.test_fraction:.0%}"
                )
            test_parts.append(members[:n_test])
        test = np.sort(np.concatenate(test_parts))
        train_mask = np.ones(len(labels), dtype=bool)
        train_mask[test] = False
        splits.append((np.flatnonzero(train_mask), test))
    return splits


def split(
    manifest: DatasetManifest, spec: SplitSpec
) -> List[Tuple[DatasetManifest, DatasetManifest]]:
    """Stratified (train, test) manifests; see :func:`split_indices`."""
    labels = [int(e.level) for e in manifest.entries]
    return [
        (manifest.subset(list(train_idx)), manifest.subset(list(test_idx)))
        for train_idx, test_idx in split_indices(labels, spec)
    ]


def _check_pair(
    predictions: Sequence[int], truths: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ShapeError(f"{p.size} predictions for {t.size} truths")
    if t.size == 0:
        raise DegenerateInputError("Nothing to evaluate")
    return p, t


def accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    p, t = _check_pair(predictions, truths)
    return float(accuracy_score(t, p))


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> np.ndarray:
    """3x3 counts; entry (i, j) is truth i predicted as j."""
    p, t = _check_pair(predictions, truths)
    if p.min() < 0 or t.min() < 0 or max(p.max(), t.max()) >= N_CLASSES:
        raise ShapeError(f"Labels must lie in [0, {N_CLASSES})")
    return confusion_matrix(t, p, labels=list(range(N_CLASSES))).astype(np.int64)


@dataclass
class EvalReport:
    """Per-split held-out accuracy plus the summed confusion matrix."""

    split_accuracies: List[float]
    confusion: np.ndarray
    test_sizes: List[int] = field(default_factory=list)
    config_hash: Optional[str] = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.split_accuracies))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "split_accuracies": list(self.split_accuracies),
            "mean_accuracy": self.mean_accuracy,
            "test_sizes": list(self.test_sizes),
            "labels": [level.label for level in CrimeLevel],
            "confusion": [int(v) for v in self.confusion.reshape(-1)],
            "config_hash": self.config_hash,
        }

    def to_text(self) -> str:
        lines = ["Held-out evaluation", ""]
        for i, (acc, size) in enumerate(zip(self.split_accuracies, self.test_sizes)):
            lines.append(f"  split {i}: accuracy {acc:.4f} on {size} examples")
        lines.append(f"  mean accuracy: {self.mean_accuracy:.4f}")
        lines += ["", "Confusion (rows = truth, columns = prediction)"]
        names = [level.label for level in CrimeLevel]
        lines.append("  " + " " * 9 + "".join(f"{n:>9}" for n in names))
        for name, row in zip(names, self.confusion):
            lines.append(f"  {name:<9}" + "".join(f"{int(v):>9}" for v in row))
        if self.config_hash:
            lines += ["", f"config hash: {self.config_hash}"]
        return "\n".join(lines) + "\n"


def write_eval_report(report: EvalReport, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text_path = out / "eval_report.txt"
    json_path = out / "eval_report.json"
    text_path.write_text(report.to_text(), encoding="utf-8")
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    return [text_path, json_path]


def train_and_classify(arch: ArchSpec, cfg: TrainConfig) -> FitPredict:
    """Default fit/predict step: fresh He-initialized model per split."""

    def fit_predict(
        train_set: TileDataset, test_set: TileDataset, seed: int
    ) -> np.ndarray:
        params, _ = train(init_params(arch, seed), train_set, replace(cfg, seed=seed))
        return classify(params, test_set.images)

    return fit_predict


def cross_validate(
    data: Union[TileDataset, DatasetManifest],
    spec: SplitSpec,
    cfg: TrainConfig,
    arch: Optional[ArchSpec] = None,
    fit_predict: Optional[FitPredict] = None,
    config_hash: Optional[str] = None,
) -> EvalReport:
    """
    Train and evaluate once per split; split ``i`` uses seed ``spec.seed + i``.

    Raises:
        TrainingError: Re-raised with the failing split's index
    """
    arch = arch or PRESETS["desk"]
    dataset = (
        load_dataset(data, arch.input_shape)
        if isinstance(data, DatasetManifest)
        else data
    )
    fit_predict = fit_predict or train_and_classify(arch, cfg)
    accuracies: List[float] = []
    sizes: List[int] = []
    total = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for i, (train_idx, test_idx) in enumerate(split_indices(dataset.labels, spec)):
        train_set, test_set = dataset.subset(train_idx), dataset.subset(test_idx)
        try:
            predictions = fit_predict(train_set, test_set, spec.seed + i)
        except TrainingError as e:
            raise TrainingError(str(e), last_params=e.last_params, split_index=i) from e
        matrix = confusion(predictions, test_set.labels)
        accuracies.append(int(np.trace(matrix)) / len(test_set))
        sizes.append(len(test_set))
        total += matrix
        record = {"split": i, "accuracy": accuracies[-1], "test": sizes[-1]}
        logger.info(f"eval_split {json.dumps(record)}")
    report = EvalReport(accuracies, total, sizes, config_hash)
    logger.info(f"eval_summary {json.dumps({'mean_accuracy': report.mean_accuracy})}")
    return report
