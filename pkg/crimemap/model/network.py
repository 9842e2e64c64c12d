"""
Forward and backward passes over a whole network.

Every intermediate tensor is checked for non-finite values; the first layer
that produces one is reported through NumericError.
"""

import logging
from typing import Any, List, Optional, Tuple, Union

import numpy as np

from ..errors import NumericError, ShapeError
from ..imagery.tiles import ImageTile, to_model_input
from .arch import ArchSpec
from .layers import Tensors, log_softmax
from .params import ModelParams

logger = logging.getLogger(__name__)

DEFAULT_PRETRAINED_MULTIPLIER = 0.1
PREDICT_BATCH = 256


def _he_tensors(
    arch: ArchSpec, layer_index: int, rng: np.random.Generator, dtype: Any = np.float32
) -> Tensors:
    input_shape = arch.shapes()[layer_index]
    layer = arch.layers[layer_index]
    shapes = layer.param_shapes(input_shape)
    if not shapes:
        return {}
    std = np.sqrt(2.0 / layer.fan_in(input_shape))
    return {
        "w": (rng.standard_normal(shapes["w"]) * std).astype(dtype),
        "b": np.zeros(shapes["b"], dtype=dtype),
    }


def init_params(arch: ArchSpec, seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases, float32."""
    rng = np.random.default_rng(seed)
    tensors = [_he_tensors(arch, i, rng) for i in range(len(arch.layers))]
    return ModelParams(arch=arch, tensors=tensors, seed=seed)


def _check_batch(params: ModelParams, images: np.ndarray) -> None:
    if images.ndim != 4 or tuple(images.shape[1:]) != params.arch.input_shape:
        dims = ", ".join(map(str, params.arch.input_shape))
        raise ShapeError(
            f"Expected a batch of shape (N, {dims}), got {images.shape}"
        )


def run_layers(
    params: ModelParams, images: np.ndarray
) -> Tuple[np.ndarray, List[Any]]:
    """Forward pass returning probabilities and the per-layer caches."""
    _check_batch(params, images)
    out = images.astype(params.dtype, copy=False)
    caches = []
    for i, (layer, tensors) in enumerate(zip(params.arch.layers, params.tensors)):
        out, cache = layer.forward(out, tensors)
        if not np.all(np.isfinite(out)):
            raise NumericError(i)
        caches.append(cache)
    return out, caches


def predict(
    params: ModelParams, images: np.ndarray, batch_size: int = PREDICT_BATCH
) -> np.ndarray:
    """Class probabilities for a batch of preprocessed images, shape (N, classes)."""
    _check_batch(params, images)
    if len(images) == 0:
        return np.zeros((0, params.arch.n_classes), dtype=params.dtype)
    chunks = [
        run_layers(params, images[start : start + batch_size])[0]
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks)


def classify(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Argmax class index per image."""
    return predict(params, images).argmax(axis=1)


def forward(params: ModelParams, tile: Union[ImageTile, np.ndarray]) -> np.ndarray:
    """
    Class probabilities for one tile.

    An ImageTile is downscaled to the network input first; a raw array must
    already have the input shape.

    Raises:
        ShapeError: If a raw array does not match the input shape
    """
    if isinstance(tile, ImageTile):
        image = to_model_input(tile.pixels, params.arch.input_shape)
    else:
        image = np.asarray(tile)
    return predict(params, image[None, ...])[0]


def _backward(
    params: ModelParams, caches: List[Any], dlogits: np.ndarray
) -> List[Tensors]:
    grads: List[Optional[Tensors]] = [None] * len(params.tensors)
    grad = dlogits
    for i in range(len(params.arch.layers) - 1, -1, -1):
        layer = params.arch.layers[i]
        dx, layer_grads = layer.backward(
            grad, caches[i], params.tensors[i], need_input_grad=i > 0
        )
        for g in layer_grads.values():
            if not np.all(np.isfinite(g)):
                raise NumericError(i, f"Non-finite gradient at layer {i}")
        grads[i] = layer_grads
        if dx is not None:
            if not np.all(np.isfinite(dx)):
                raise NumericError(i, f"Non-finite gradient at layer {i}")
            grad = dx
    return [g if g is not None else {} for g in grads]


def loss_gradients_and_probs(
    params: ModelParams, images: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[Tensors], np.ndarray]:
    """:func:`loss_and_gradients` that also returns the batch probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ShapeError("Batch must not be empty")
    if labels.shape != (len(images),):
        raise ShapeError(f"{len(images)} images but labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= params.arch.n_classes:
        raise ShapeError(f"Labels must lie in [0, {params.arch.n_classes})")
    probs, caches = run_layers(params, images)
    n = len(labels)
    rows = np.arange(n)
    logits = caches[-1][1]
    loss = float(-log_softmax(logits)[rows, labels].mean())
    if not np.isfinite(loss):
        raise NumericError(len(params.arch.layers) - 1, "Non-finite loss")
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, _backward(params, caches, dlogits), probs


def loss_and_gradients(
    params: ModelParams, images: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[Tensors]]:
    """
    Mean cross-entropy of a batch and its gradient for every parameter tensor.

    Raises:
        ShapeError: If the batch is empty or shapes disagree
        NumericError: If any intermediate value is not finite
    """
    loss, grads, _ = loss_gradients_and_probs(params, images, labels)
    return loss, grads


def replace_head(
    params: ModelParams,
    classes: int = 3,
    seed: int = 0,
    pretrained_multiplier: float = DEFAULT_PRETRAINED_MULTIPLIER,
) -> ModelParams:
    """
    Swap the classification layer for a freshly initialized one.

    All other tensors are copied bit-exactly; they train at
    ``pretrained_multiplier`` times the base rate, the new head at full rate.
    """
    arch = params.arch.with_head(classes)
    head = len(arch.layers) - 1
    tensors = [
        {k: v.copy() for k, v in layer.items()} for layer in params.tensors[:head]
    ]
    tensors.append(_he_tensors(arch, head, np.random.default_rng(seed), params.dtype))
    multipliers = [pretrained_multiplier] * head + [1.0]
    metadata = dict(params.metadata)
    metadata["head_replaced"] = {
        "classes": classes,
        "seed": seed,
        "source_iterations": params.iterations,
    }
    logger.info(
        f"Replaced {params.arch.n_classes}-class head with a {classes}-class head "
        f"(pretrained layers at x{pretrained_multiplier} learning rate)"
    )
    return ModelParams(
        arch=arch,
        tensors=tensors,
        seed=params.seed,
        lr_multipliers=multipliers,
        iterations=params.iterations,
        metadata=metadata,
    )
