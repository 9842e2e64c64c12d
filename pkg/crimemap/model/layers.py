"""
Layer types of the convolutional classifier.

Tensors are NHWC. Each layer declares its output shape and parameter shapes
for a given input shape, runs a batched forward pass returning a cache, and a
backward pass from that cache. Arithmetic follows the parameter dtype, so the
same code serves 32-bit training and 64-bit gradient checks.
"""

from dataclasses import asdict, dataclass
from typing import Any, ClassVar, Dict, Optional, Tuple, Type

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

Shape = Tuple[int, ...]
Tensors = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Layer:
    """Base class; parameter-free identity by default."""

    kind: ClassVar[str] = ""

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        return {}

    def fan_in(self, input_shape: Shape) -> int:
        return 0

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        raise NotImplementedError

    def pattern(self, cache: Any) -> Optional[np.ndarray]:
        """Discrete routing state (ReLU masks, pooling winners); None when smooth."""
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.kind, **asdict(self)}


def _require_rank(layer: Layer, input_shape: Shape, rank: int) -> None:
    if len(input_shape) != rank:
        raise ShapeError(
            f"{type(layer).__name__} expects a rank-{rank} input, got {input_shape}"
        )


@dataclass(frozen=True)
class Conv(Layer):
    """2-D convolution with square kernels; weights (k, k, C_in, filters)."""

    kind: ClassVar[str] = "conv"
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_rank(self, input_shape, 3)
        if min(self.filters, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ShapeError(f"Invalid convolution {self}")
        h, w, _ = input_shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kernel or wp < self.kernel:
            raise ShapeError(
                f"Kernel {self.kernel} larger than padded input {input_shape}"
            )
        return (
            (hp - self.kernel) // self.stride + 1,
            (wp - self.kernel) // self.stride + 1,
            self.filters,
        )

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        self.output_shape(input_shape)
        return {
            "w": (self.kernel, self.kernel, input_shape[2], self.filters),
            "b": (self.filters,),
        }

    def fan_in(self, input_shape: Shape) -> int:
        return self.kernel * self.kernel * input_shape[2]

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        # (N, H_out, W_out, C, k, k) view over the padded input
        windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        out = np.tensordot(windows, params["w"], axes=([3, 4, 5], [2, 0, 1]))
        return out + params["b"], (xp.shape, windows)

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        padded_shape, windows = cache
        k, s, p = self.kernel, self.stride, self.padding
        w = params["w"]
        dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2]))
        grads = {
            "w": dw.transpose(1, 2, 0, 3),
            "b": dout.sum(axis=(0, 1, 2)),
        }
        if not need_input_grad:
            return None, grads
        _, ho, wo, _ = dout.shape
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        for i in range(k):
            rows = slice(i, i + s * (ho - 1) + 1, s)
            for j in range(k):
                cols = slice(j, j + s * (wo - 1) + 1, s)
                dxp[:, rows, cols, :] += dout @ w[i, j].T
        if p:
            dxp = dxp[:, p : padded_shape[1] - p, p : padded_shape[2] - p, :]
        return dxp, grads


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        mask = x > 0
        return x * mask, mask

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        return dout * cache, {}

    def pattern(self, cache: Any) -> Optional[np.ndarray]:
        return np.asarray(cache)


@dataclass(frozen=True)
class MaxPool(Layer):
    """Max pooling over square windows, no padding."""

    kind: ClassVar[str] = "maxpool"
    window: int = 2
    stride: int = 2

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_rank(self, input_shape, 3)
        if min(self.window, self.stride) < 1:
            raise ShapeError(f"Invalid pooling {self}")
        h, w, c = input_shape
        if h < self.window or w < self.window:
            raise ShapeError(
                f"Pool window {self.window} larger than input {input_shape}"
            )
        return (
            (h - self.window) // self.stride + 1,
            (w - self.window) // self.stride + 1,
            c,
        )

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        k, s = self.window, self.stride
        windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = windows.reshape(*windows.shape[:4], k * k)
        winners = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]
        return out, (x.shape, winners)

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        input_shape, winners = cache
        k, s = self.window, self.stride
        _, ho, wo, _ = dout.shape
        dx = np.zeros(input_shape, dtype=dout.dtype)
        for i in range(k):
            rows = slice(i, i + s * (ho - 1) + 1, s)
            for j in range(k):
                cols = slice(j, j + s * (wo - 1) + 1, s)
                dx[:, rows, cols, :] += dout * (winners == i * k + j)
        return dx, {}

    def pattern(self, cache: Any) -> Optional[np.ndarray]:
        return np.asarray(cache[1])


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        return dout.reshape(cache), {}


@dataclass(frozen=True)
class Dense(Layer):
    """Fully connected layer; weights (inputs, units)."""

    kind: ClassVar[str] = "dense"
    units: int

    def output_shape(self, input_shape: Shape) -> Shape:
        _require_rank(self, input_shape, 1)
        if self.units < 1:
            raise ShapeError(f"Invalid dense layer {self}")
        return (self.units,)

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        self.output_shape(input_shape)
        return {"w": (input_shape[0], self.units), "b": (self.units,)}

    def fan_in(self, input_shape: Shape) -> int:
        return input_shape[0]

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        return x @ params["w"] + params["b"], x

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        grads = {"w": cache.T @ dout, "b": dout.sum(axis=0)}
        return (dout @ params["w"].T if need_input_grad else None), grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class SoftmaxOutput(Layer):
    """
    Classification head: a dense layer to ``classes`` logits followed by softmax.

    Forward returns probabilities and caches the logits; backward takes the
    gradient with respect to the logits.
    """

    kind: ClassVar[str] = "softmax"
    classes: int = 3

    def _dense(self) -> Dense:
        return Dense(self.classes)

    def output_shape(self, input_shape: Shape) -> Shape:
        return self._dense().output_shape(input_shape)

    def param_shapes(self, input_shape: Shape) -> Dict[str, Shape]:
        return self._dense().param_shapes(input_shape)

    def fan_in(self, input_shape: Shape) -> int:
        return input_shape[0]

    def forward(self, x: np.ndarray, params: Tensors) -> Tuple[np.ndarray, Any]:
        logits = x @ params["w"] + params["b"]
        return softmax(logits), (x, logits)

    def backward(
        self,
        dout: np.ndarray,
        cache: Any,
        params: Tensors,
        need_input_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], Tensors]:
        return self._dense().backward(dout, cache[0], params, need_input_grad)


LAYER_TYPES: Dict[str, Type[Layer]] = {
    cls.kind: cls for cls in (Conv, ReLU, MaxPool, Flatten, Dense, SoftmaxOutput)
}


def layer_from_dict(data: Dict[str, Any]) -> Layer:
    fields = dict(data)
    kind = fields.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ShapeError(f"Unknown layer type: {kind!r}")
    try:
        return LAYER_TYPES[kind](**fields)
    except TypeError as e:
        raise ShapeError(f"Invalid {kind} layer: {e}") from e
