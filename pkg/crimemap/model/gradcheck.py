"""
Finite-difference gradient checks.

Central differences are compared coordinate by coordinate with the analytic
gradients. A perturbation that flips a ReLU mask or a pooling winner crosses a
kink of the function; such coordinates are skipped and counted.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .layers import Layer, SoftmaxOutput, Tensors, log_softmax
from .network import loss_and_gradients, run_layers
from .params import ModelParams

DEFAULT_EPS = 1e-3
_ABS_FLOOR = 1e-6


@dataclass
class GradientCheck:
    """Maximum relative error per tensor group plus coordinate counts."""

    errors: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _ABS_FLOOR)


def _check_array(
    name: str,
    target: np.ndarray,
    analytic: np.ndarray,
    evaluate: Callable[[], Tuple[float, List[np.ndarray]]],
    base_pattern: List[np.ndarray],
    eps: float,
    coords: Optional[np.ndarray],
    result: GradientCheck,
) -> None:
    flat = target.reshape(-1)
    grad = analytic.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for idx in indices:
        original = flat[idx]
        flat[idx] = original + eps
        f_plus, pattern_plus = evaluate()
        flat[idx] = original - eps
        f_minus, pattern_minus = evaluate()
        flat[idx] = original
        if not (
            _same(pattern_plus, base_pattern) and _same(pattern_minus, base_pattern)
        ):
            result.skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        worst = max(worst, relative_error(float(grad[idx]), numeric))
        result.checked += 1
    result.errors[name] = worst


def _same(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _sample(
    size: int, max_coords: Optional[int], rng: np.random.Generator
) -> Optional[np.ndarray]:
    if max_coords is None or size <= max_coords:
        return None
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def check_layer_gradients(
    layer: Layer,
    x: np.ndarray,
    params: Optional[Tensors] = None,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
) -> GradientCheck:
    """
    Check one layer in float64.

    The scalar objective is ``sum(out * R)`` for a fixed random ``R``, or the
    mean cross-entropy against random labels for a SoftmaxOutput.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    input_shape = tuple(x.shape[1:])
    if params is None:
        shapes = layer.param_shapes(input_shape)
        std = np.sqrt(2.0 / max(layer.fan_in(input_shape), 1))
        params = {
            name: rng.standard_normal(shape) * std for name, shape in shapes.items()
        }
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out, cache = layer.forward(x, params)

    if isinstance(layer, SoftmaxOutput):
        labels = rng.integers(layer.classes, size=len(x))
        rows = np.arange(len(x))

        def objective(result: np.ndarray, result_cache: Any) -> float:
            return float(-log_softmax(result_cache[1])[rows, labels].mean())

        dout = out.copy()
        dout[rows, labels] -= 1
        dout /= len(x)
    else:
        weights = rng.standard_normal(out.shape)

        def objective(result: np.ndarray, result_cache: Any) -> float:
            return float(np.sum(result * weights))

        dout = weights

    dx, grads = layer.backward(dout, cache, params)
    base = layer.pattern(cache)
    base_pattern = [] if base is None else [base]

    def evaluate() -> Tuple[float, List[np.ndarray]]:
        result, result_cache = layer.forward(x, params)
        p = layer.pattern(result_cache)
        return objective(result, result_cache), ([] if p is None else [p])

    result = GradientCheck()
    assert dx is not None
    _check_array("x", x, dx, evaluate, base_pattern, eps, None, result)
    for name in sorted(params):
        _check_array(
            name, params[name], grads[name], evaluate, base_pattern, eps, None, result
        )
    return result


def _network_pattern(params: ModelParams, caches: List[Any]) -> List[np.ndarray]:
    patterns = []
    for layer, cache in zip(params.arch.layers, caches):
        p = layer.pattern(cache)
        if p is not None:
            patterns.append(p)
    return patterns


def check_gradients(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    eps: float = DEFAULT_EPS,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradientCheck:
    """
    Check :func:`loss_and_gradients` for every parameter group in float64.

    Args:
        max_coords: Check at most this many random coordinates per tensor
    """
    params64 = params.astype(np.float64)
    images64 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, grads = loss_and_gradients(params64, images64, labels)
    _, base_caches = run_layers(params64, images64)
    base_pattern = _network_pattern(params64, base_caches)

    def evaluate() -> Tuple[float, List[np.ndarray]]:
        _, caches = run_layers(params64, images64)
        logits = caches[-1][1]
        loss = float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())
        return loss, _network_pattern(params64, caches)

    rng = np.random.default_rng(seed)
    result = GradientCheck()
    for i, layer_tensors in enumerate(params64.tensors):
        for name in sorted(layer_tensors):
            tensor = layer_tensors[name]
            _check_array(
                f"layer{i}.{name}",
                tensor,
                grads[i][name],
                evaluate,
                base_pattern,
                eps,
                _sample(tensor.size, max_coords, rng),
                result,
            )
    return result
