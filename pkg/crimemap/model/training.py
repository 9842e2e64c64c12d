"""Seeded mini-batch SGD with momentum."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ..errors import ConfigError, DegenerateInputError, NumericError, TrainingError
from ..imagery.dataset import DatasetManifest, TileDataset, load_dataset
from .network import DEFAULT_PRETRAINED_MULTIPLIER, classify, loss_gradients_and_probs
from .params import ModelParams
from .serialization import save_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        learning_rate: Base step size
        momentum: Velocity decay in [0, 1)
        batch_size: Examples per step (the last batch of an epoch may be smaller)
        iterations: SGD steps
        seed: Seed of the per-epoch shuffles
        pretrained_multiplier: Learning-rate factor for layers kept by finetuning
        log_every: Iterations between training-log records
        checkpoint_every: Iterations between retained checkpoints
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    iterations: int = 2000
    seed: int = 0
    pretrained_multiplier: float = DEFAULT_PRETRAINED_MULTIPLIER
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.iterations < 1:
            raise ConfigError("train.iterations must be at least 1")
        if not 0 < self.pretrained_multiplier <= 1:
            raise ConfigError("train.pretrained_multiplier must lie in (0, 1]")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError(
                "train.log_every and train.checkpoint_every must be at least 1"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown train settings: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    loss: float
    train_accuracy: float
    val_accuracy: Optional[float] = None


@dataclass
class TrainingLog:
    """
    Periodic training records. ``stopped_at`` is set when a target accuracy
    stopped training early.
    """

    records: List[LogRecord] = field(default_factory=list)
    stopped_at: Optional[int] = None

    def to_tsv(self) -> str:
        lines = ["iteration\tloss\ttrain_accuracy"]
        lines += [
            f"{r.iteration}\t{r.loss:.6f}\t{r.train_accuracy:.4f}" for r in self.records
        ]
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def _as_dataset(
    data: Union[TileDataset, DatasetManifest], params: ModelParams
) -> TileDataset:
    if isinstance(data, DatasetManifest):
        return load_dataset(data, params.arch.input_shape)
    return data


def evaluate(params: ModelParams, data: TileDataset) -> float:
    """Fraction of examples classified correctly."""
    if len(data) == 0:
        raise DegenerateInputError("Cannot evaluate on an empty dataset")
    return float(np.mean(classify(params, data.images) == data.labels))


def train(
    init: ModelParams,
    data: Union[TileDataset, DatasetManifest],
    cfg: TrainConfig,
    validation: Optional[TileDataset] = None,
    target_accuracy: Optional[float] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> Tuple[ModelParams, TrainingLog]:
    """
    Train a copy of ``init``.

    Each epoch visits the examples in a fresh seeded permutation. When
    ``validation`` and ``target_accuracy`` are given, validation accuracy is
    measured at every log point and training stops once it reaches the target.

    Raises:
        DegenerateInputError: If the dataset is empty
        TrainingError: On non-finite values; carries the last checkpoint
    """
    dataset = _as_dataset(data, init)
    n = len(dataset)
    if n == 0:
        raise DegenerateInputError("Cannot train on an empty dataset")
    params = init.copy()
    params.metadata.setdefault("training", []).append(cfg.to_dict())
    start = {
        "examples": n,
        "parameters": params.n_parameters(),
        "iterations": cfg.iterations,
    }
    logger.debug(f"train_start {json.dumps(start)}")
    checkpoint = params.copy()
    velocity = [
        {k: np.zeros_like(v) for k, v in layer.items()} for layer in params.tensors
    ]
    rng = np.random.default_rng(cfg.seed)
    log = TrainingLog()
    order = rng.permutation(n)
    position = 0
    window_loss, window_correct, window_seen = 0.0, 0, 0
    done = 0

    for iteration in range(1, cfg.iterations + 1):
        if position >= n:
            order = rng.permutation(n)
            position = 0
        batch = order[position : position + cfg.batch_size]
        position += len(batch)
        labels = dataset.labels[batch]
        try:
            loss, grads, probs = loss_gradients_and_probs(
                params, dataset.images[batch], labels
            )
        except NumericError as e:
            raise TrainingError(
                f"Numeric failure at iteration {params.iterations + 1} "
                f"(layer {e.layer_index}); keeping checkpoint from iteration "
                f"{checkpoint.iterations}",
                last_params=checkpoint,
            ) from e

        for i, (layer, layer_grads) in enumerate(zip(params.tensors, grads)):
            rate = cfg.learning_rate * params.multiplier(i)
            for name, g in layer_grads.items():
                v = velocity[i][name]
                v *= cfg.momentum
                v -= rate * g
                layer[name] += v
        params.iterations += 1
        done = iteration
        if not params.is_finite():
            raise TrainingError(
                f"Weights diverged at iteration {params.iterations}; "
                f"keeping checkpoint from iteration {checkpoint.iterations}",
                last_params=checkpoint,
            )

        window_loss += loss * len(batch)
        window_correct += int(np.sum(probs.argmax(axis=1) == labels))
        window_seen += len(batch)
        if iteration % cfg.checkpoint_every == 0:
            checkpoint = params.copy()
            if checkpoint_path is not None:
                save_params(checkpoint, checkpoint_path)
        if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
            record = LogRecord(
                iteration=iteration,
                loss=window_loss / window_seen,
                train_accuracy=window_correct / window_seen,
                val_accuracy=(
                    evaluate(params, validation) if validation is not None else None
                ),
            )
            log.records.append(record)
            logger.debug(f"train_progress {json.dumps(asdict(record))}")
            window_loss, window_correct, window_seen = 0.0, 0, 0
            if (
                target_accuracy is not None
                and record.val_accuracy is not None
                and record.val_accuracy >= target_accuracy
            ):
                log.stopped_at = iteration
                break

    summary = {
        "iterations": done,
        "examples": n,
        "final_loss": log.records[-1].loss if log.records else None,
        "stopped_at": log.stopped_at,
    }
    logger.info(f"train_summary {json.dumps(summary)}")
    return params, log
