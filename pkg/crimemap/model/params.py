"""Model parameters: per-layer tensors plus training metadata."""

import copy
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ..errors import ShapeError
from .arch import ArchSpec
from .layers import Tensors


@dataclass
class ModelParams:
    """
    Weights and biases of an :class:`ArchSpec`.

    Attributes:
        arch: Architecture the tensors belong to
        tensors: One dict per layer ({} for parameter-free layers)
        seed: Seed the weights were initialized from
        lr_multipliers: Per-layer factor on the base learning rate
        iterations: SGD iterations applied so far
        metadata: JSON-serializable extras (training history, config hash)
    """

    arch: ArchSpec
    tensors: List[Tensors]
    seed: int = 0
    lr_multipliers: Optional[List[float]] = None
    iterations: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = self.arch.param_shapes()
        if len(self.tensors) != len(expected):
            raise ShapeError(
                f"Expected tensors for {len(expected)} layers, got {len(self.tensors)}"
            )
        for i, (have, want) in enumerate(zip(self.tensors, expected)):
            if set(have) != set(want):
                raise ShapeError(
                    f"Layer {i}: expected tensors {sorted(want)}, got {sorted(have)}"
                )
            for name, shape in want.items():
                if tuple(have[name].shape) != tuple(shape):
                    raise ShapeError(
                        f"Layer {i} tensor {name}: expected shape {shape}, "
                        f"got {have[name].shape}"
                    )
        if self.lr_multipliers is None:
            self.lr_multipliers = [1.0] * len(self.tensors)
        elif len(self.lr_multipliers) != len(self.tensors):
            raise ShapeError("One learning-rate multiplier per layer is required")

    @property
    def dtype(self) -> np.dtype:
        for layer in self.tensors:
            for t in layer.values():
                return t.dtype
        return np.dtype(np.float32)

    def multiplier(self, layer_index: int) -> float:
        assert self.lr_multipliers is not None
        return self.lr_multipliers[layer_index]

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            tensors=[{k: v.copy() for k, v in layer.items()} for layer in self.tensors],
            seed=self.seed,
            lr_multipliers=list(self.lr_multipliers or []),
            iterations=self.iterations,
            metadata=copy.deepcopy(self.metadata),
        )

    def astype(self, dtype: Any) -> "ModelParams":
        """Copy with every tensor cast (float64 for gradient checks)."""
        cast = self.copy()
        cast.tensors = [
            {k: v.astype(dtype) for k, v in layer.items()} for layer in cast.tensors
        ]
        return cast

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(t)) for layer in self.tensors for t in layer.values()
        )

    def n_parameters(self) -> int:
        return sum(t.size for layer in self.tensors for t in layer.values())
