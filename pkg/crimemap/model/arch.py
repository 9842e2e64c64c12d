"""Declared network architectures."""

from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

from ..errors import ConfigError, ShapeError
from .layers import (
    Conv,
    Dense,
    Flatten,
    Layer,
    MaxPool,
    ReLU,
    Shape,
    SoftmaxOutput,
    layer_from_dict,
)


@dataclass(frozen=True)
class ArchSpec:
    """
    Input shape plus an ordered layer list ending in a SoftmaxOutput.

    Construction fails with ShapeError unless every layer accepts the output
    shape of the one before it.
    """

    input_shape: Tuple[int, int, int]
    layers: Tuple[Layer, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(
                f"Input shape must be (height, width, channels), got {self.input_shape}"
            )
        if not self.layers or not isinstance(self.layers[-1], SoftmaxOutput):
            raise ShapeError("The last layer must be a SoftmaxOutput")
        if any(isinstance(layer, SoftmaxOutput) for layer in self.layers[:-1]):
            raise ShapeError("SoftmaxOutput may only appear as the last layer")
        self.shapes()

    def shapes(self) -> List[Shape]:
        """Per-sample tensor shape before the first layer and after each layer."""
        shapes: List[Shape] = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def param_shapes(self) -> List[Dict[str, Shape]]:
        shapes = self.shapes()
        return [layer.param_shapes(shapes[i]) for i, layer in enumerate(self.layers)]

    @property
    def n_classes(self) -> int:
        head = self.layers[-1]
        assert isinstance(head, SoftmaxOutput)
        return head.classes

    def with_head(self, classes: int) -> "ArchSpec":
        return ArchSpec(self.input_shape, self.layers[:-1] + (SoftmaxOutput(classes),))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchSpec":
        return cls(
            input_shape=tuple(data["input_shape"]),  # type: ignore[arg-type]
            layers=tuple(layer_from_dict(d) for d in data["layers"]),
        )


PRESETS: Dict[str, ArchSpec] = {
    "desk": ArchSpec(
        (64, 64, 3),
        (
            Conv(8, 5, padding=2),
            ReLU(),
            MaxPool(2, 2),
            Conv(16, 3, padding=1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Dense(64),
            ReLU(),
            SoftmaxOutput(3),
        ),
    ),
    "tiny": ArchSpec(
        (16, 16, 3),
        (
            Conv(4, 3, padding=1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Dense(16),
            ReLU(),
            SoftmaxOutput(3),
        ),
    ),
}


def preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]
    except KeyError as e:
        choices = ", ".join(sorted(PRESETS))
        raise ConfigError(
            f"Unknown architecture preset {name!r}; choose from {choices}"
        ) from e
