"""Layer definitions, the network model and forward/backward propagation."""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DenseMatrix, Tensor, col2im, im2col_batch, lower_weights, output_extent

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class LayerKind(Enum):
    CONV = 'conv'
    FC = 'fc'
    RELU = 'relu'
    MAX_POOL = 'max_pool'
    SOFTMAX = 'softmax'
    BLOCK_BEGIN = 'residual_begin'
    BLOCK_END = 'residual_end'

    @property
    def weighted(self) -> bool:
        return self in (LayerKind.CONV, LayerKind.FC)


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``n_out`` is the filter count of a conv layer or the fan-out of an FC
    layer. ``kernel``/``stride``/``pad`` apply to conv and max-pool layers.
    ``shortcut_id`` pairs a BLOCK_BEGIN with its BLOCK_END.
    """
    kind: LayerKind
    name: str = ''
    n_out: int = 0
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    pad: Tuple[int, int] = (0, 0)
    shortcut_id: Optional[str] = None


@dataclass(eq=False)
class WeightTensor4D:
    """Weights of a conv layer (N, C, M, K) or an FC layer stored as (N, C, 1, 1).

    ``fiber_mask`` marks the surviving shape fibers (columns of the lowered
    weight matrix). Masked-out fibers stay in ``values`` as zeros so the tensor
    remains rectangular; lowering drops them.
    """
    values: np.ndarray
    bias: np.ndarray
    fiber_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ShapeError(f"Weight tensor must be 4-D with positive extents, got {self.values.shape}")
        if self.bias.shape != (self.values.shape[0],):
            raise ShapeError(f"Bias must have shape ({self.values.shape[0]},), got {self.bias.shape}")
        if self.fiber_mask is not None:
            self.fiber_mask = np.asarray(self.fiber_mask, dtype=bool)
            if self.fiber_mask.shape != (self.fiber_count,):
                raise ShapeError(f"Fiber mask must have {self.fiber_count} entries")

    @property
    def n_filters(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def fiber_count(self) -> int:
        return self.n_channels * self.height * self.width

    @property
    def surviving_fibers(self) -> int:
        return self.fiber_count if self.fiber_mask is None else int(self.fiber_mask.sum())

    @property
    def size(self) -> int:
        return self.values.size + self.bias.size

    def lowered(self) -> DenseMatrix:
        """GEMM weight matrix with masked-out fiber columns removed."""
        matrix = lower_weights(self.values)
        if self.fiber_mask is not None:
            matrix = matrix[:, self.fiber_mask]
        return matrix

    def param_vector(self) -> np.ndarray:
        """Flat view used by group index sets: weights first, then bias."""
        return np.concatenate([self.values.ravel(), self.bias])

    def set_param_vector(self, vector: np.ndarray):
        n_weights = self.values.size
        self.values = vector[:n_weights].reshape(self.values.shape).copy()
        self.bias = vector[n_weights:].copy()

    def copy(self) -> 'WeightTensor4D':
        return WeightTensor4D(
            self.values.copy(),
            self.bias.copy(),
            None if self.fiber_mask is None else self.fiber_mask.copy(),
        )


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    params: Optional[WeightTensor4D] = None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> LayerKind:
        return self.spec.kind


@dataclass(eq=False)
class NetworkModel:
    """An ordered stack of layers applied to inputs of ``input_shape`` (C, H, W)."""
    input_shape: Shape
    layers: List[Layer]
    name: str = ''
    velocity: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(x) for x in self.input_shape)
        seen = set()
        for index, layer in enumerate(self.layers):
            if not layer.spec.name:
                layer.spec = replace(layer.spec, name=f"{layer.kind.value}{index}")
            if layer.name in seen:
                raise ConfigError(f"Duplicate layer name {layer.name!r}")
            seen.add(layer.name)
            if layer.kind.weighted != (layer.params is not None):
                raise ConfigError(f"Layer {layer.name!r} of kind {layer.kind.value} has mismatched parameters")
        self._shapes = self._infer_shapes()

    @property
    def L(self) -> int:
        return sum(1 for layer in self.layers if layer.kind.weighted)

    @property
    def weighted_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.kind.weighted]

    @property
    def n_classes(self) -> int:
        return int(np.prod(self._shapes[-1][1]))

    @property
    def parameter_count(self) -> int:
        return sum(layer.params.size for layer in self.weighted_layers)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigError(f"No layer named {name!r}")

    def index_of(self, name: str) -> int:
        for index, layer in enumerate(self.layers):
            if layer.name == name:
                return index
        raise ConfigError(f"No layer named {name!r}")

    def layer_shapes(self) -> List[Tuple[Shape, Shape]]:
        """(input shape, output shape) of every layer, batch axis excluded."""
        return list(self._shapes)

    def block_of(self, name: str) -> Optional[Tuple[int, int]]:
        """Positions of the innermost (BLOCK_BEGIN, BLOCK_END) pair enclosing ``name``."""
        target = self.index_of(name)
        stack, enclosing = [], None
        for index, layer in enumerate(self.layers):
            if layer.kind is LayerKind.BLOCK_BEGIN:
                stack.append(index)
            elif layer.kind is LayerKind.BLOCK_END:
                begin = stack.pop()
                if begin < target < index and (enclosing is None or begin > enclosing[0]):
                    enclosing = (begin, index)
        return enclosing

    def copy(self) -> 'NetworkModel':
        return NetworkModel(
            input_shape=self.input_shape,
            layers=[Layer(layer.spec, None if layer.params is None else layer.params.copy())
                    for layer in self.layers],
            name=self.name,
        )

    def _infer_shapes(self) -> List[Tuple[Shape, Shape]]:
        shapes = []
        shape = self.input_shape
        open_blocks = []
        for index, layer in enumerate(self.layers):
            spec = layer.spec
            in_shape = shape
            if spec.kind is LayerKind.CONV:
                if len(shape) != 3:
                    raise ShapeError(f"Conv layer {spec.name!r} needs a (C, H, W) input, got {shape}")
                params = layer.params
                if params.n_channels != shape[0] or (params.height, params.width) != tuple(spec.kernel):
                    raise ShapeError(
                        f"Conv layer {spec.name!r} weights {params.values.shape} do not fit input {shape}"
                    )
                shape = (
                    params.n_filters,
                    output_extent(shape[1], spec.kernel[0], spec.stride[0], spec.pad[0]),
                    output_extent(shape[2], spec.kernel[1], spec.stride[1], spec.pad[1]),
                )
            elif spec.kind is LayerKind.FC:
                fan_in = int(np.prod(shape))
                if layer.params.n_channels != fan_in or layer.params.height != 1 or layer.params.width != 1:
                    raise ShapeError(
                        f"FC layer {spec.name!r} weights {layer.params.values.shape} do not fit fan-in {fan_in}"
                    )
                shape = (layer.params.n_filters,)
            elif spec.kind is LayerKind.MAX_POOL:
                if len(shape) != 3:
                    raise ShapeError(f"Pool layer {spec.name!r} needs a (C, H, W) input, got {shape}")
                if any(p >= k for p, k in zip(spec.pad, spec.kernel)):
                    raise ShapeError(f"Pool layer {spec.name!r} padding {tuple(spec.pad)} must be smaller than "
                                     f"its kernel {tuple(spec.kernel)}")
                shape = (
                    shape[0],
                    output_extent(shape[1], spec.kernel[0], spec.stride[0], spec.pad[0]),
                    output_extent(shape[2], spec.kernel[1], spec.stride[1], spec.pad[1]),
                )
            elif spec.kind is LayerKind.SOFTMAX:
                if index != len(self.layers) - 1 or len(shape) != 1:
                    raise ConfigError("Softmax must be the last layer and follow an FC layer")
            elif spec.kind is LayerKind.BLOCK_BEGIN:
                open_blocks.append((spec.shortcut_id, shape))
            elif spec.kind is LayerKind.BLOCK_END:
                if not open_blocks:
                    raise ConfigError(f"Residual block end {spec.name!r} has no matching begin")
                shortcut_id, block_input = open_blocks.pop()
                if shortcut_id != spec.shortcut_id:
                    raise ConfigError(
                        f"Residual block end {spec.shortcut_id!r} closes block {shortcut_id!r}"
                    )
                if block_input != shape:
                    raise ShapeError(
                        f"Identity shortcut {shortcut_id!r} maps {block_input} to {shape}"
                    )
            shapes.append((in_shape, shape))
        if open_blocks:
            raise ConfigError(f"Residual block {open_blocks[-1][0]!r} is never closed")
        return shapes


def models_equal(a: NetworkModel, b: NetworkModel) -> bool:
    """Deep equality of topology and parameters (bitwise on arrays)."""
    if a.input_shape != b.input_shape or len(a.layers) != len(b.layers):
        return False
    for left, right in zip(a.layers, b.layers):
        if left.spec != right.spec:
            return False
        if left.params is None or right.params is None:
            if left.params is not right.params:
                return False
            continue
        if not (np.array_equal(left.params.values, right.params.values)
                and np.array_equal(left.params.bias, right.params.bias)):
            return False
        masks = (left.params.fiber_mask, right.params.fiber_mask)
        if (masks[0] is None) != (masks[1] is None):
            return False
        if masks[0] is not None and not np.array_equal(*masks):
            return False
    return True


@dataclass
class ForwardCache:
    """Per-layer values saved by ``forward`` for ``backward``."""
    inputs: List[np.ndarray]
    saved: List[object]
    logits: DenseMatrix


@dataclass
class Gradients:
    weights: Dict[str, np.ndarray]
    bias: Dict[str, np.ndarray]
    loss: float = 0.0


def _conv_forward(layer: Layer, x: Tensor):
    spec, params = layer.spec, layer.params
    cols = im2col_batch(x, spec.kernel, spec.stride, spec.pad)
    if params.fiber_mask is not None:
        cols = cols[:, params.fiber_mask, :]
    out = np.matmul(params.lowered(), cols) + params.bias[:, np.newaxis]
    h_out = output_extent(x.shape[2], spec.kernel[0], spec.stride[0], spec.pad[0])
    w_out = output_extent(x.shape[3], spec.kernel[1], spec.stride[1], spec.pad[1])
    return out.reshape(x.shape[0], params.n_filters, h_out, w_out), cols


def _fc_forward(layer: Layer, x: Tensor):
    params = layer.params
    flat = x.reshape(x.shape[0], -1)
    if params.fiber_mask is not None:
        flat = flat[:, params.fiber_mask]
    return flat @ params.lowered().T + params.bias, flat


def _pool_forward(layer: Layer, x: Tensor):
    spec = layer.spec
    batch, channels, height, width = x.shape
    cols = im2col_batch(x.reshape(batch * channels, 1, height, width), spec.kernel, spec.stride, spec.pad,
                        pad_value=-np.inf)
    winners = cols.argmax(axis=1)
    pooled = np.take_along_axis(cols, winners[:, np.newaxis, :], axis=1)[:, 0, :]
    h_out = output_extent(height, spec.kernel[0], spec.stride[0], spec.pad[0])
    w_out = output_extent(width, spec.kernel[1], spec.stride[1], spec.pad[1])
    return pooled.reshape(batch, channels, h_out, w_out), (winners, cols.shape)


def forward(model: NetworkModel, batch: Tensor) -> Tuple[DenseMatrix, ForwardCache]:
    """Run ``batch`` (B, C, H, W) through the model.

    Returns:
        The (B, n_classes) logits (pre-softmax) and the cache for ``backward``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"Batch of shape {x.shape} does not match model input {model.input_shape}")

    inputs, saved, shortcuts = [], [], []
    for layer in model.layers:
        inputs.append(x)
        kind = layer.kind
        aux = None
        if kind is LayerKind.CONV:
            x, aux = _conv_forward(layer, x)
        elif kind is LayerKind.FC:
            x, aux = _fc_forward(layer, x)
        elif kind is LayerKind.RELU:
            aux = x > 0
            x = np.where(aux, x, 0.0)
        elif kind is LayerKind.MAX_POOL:
            x, aux = _pool_forward(layer, x)
        elif kind is LayerKind.BLOCK_BEGIN:
            shortcuts.append(x)
        elif kind is LayerKind.BLOCK_END:
            x = x + shortcuts.pop()
        saved.append(aux)

    logits = x.reshape(x.shape[0], -1)
    return logits, ForwardCache(inputs=inputs, saved=saved, logits=logits)


def softmax_cross_entropy(logits: DenseMatrix, labels: np.ndarray) -> Tuple[float, DenseMatrix]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"Expected {logits.shape[0]} labels, got shape {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(logits.shape[0])
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / logits.shape[0]


def backward(model: NetworkModel, cache: ForwardCache, labels: np.ndarray) -> Gradients:
    """Gradient of the mean softmax cross-entropy w.r.t. every parameter."""
    loss, grad = softmax_cross_entropy(cache.logits, labels)
    grads = Gradients(weights={}, bias={}, loss=loss)
    shortcut_grads = []

    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        kind, x, aux = layer.kind, cache.inputs[index], cache.saved[index]
        need_input_grad = index > 0

        if kind is LayerKind.SOFTMAX:
            continue
        elif kind is LayerKind.FC:
            params = layer.params
            d_out = grad.reshape(grad.shape[0], -1)
            d_weights = d_out.T @ aux
            grads.weights[layer.name] = _unmask(d_weights, params).reshape(params.values.shape)
            grads.bias[layer.name] = d_out.sum(axis=0)
            if need_input_grad:
                grad = _unmask(d_out @ params.lowered(), params).reshape(x.shape)
        elif kind is LayerKind.CONV:
            params, spec = layer.params, layer.spec
            d_out = grad.reshape(grad.shape[0], params.n_filters, -1)
            d_weights = np.tensordot(d_out, aux, axes=([0, 2], [0, 2]))
            grads.weights[layer.name] = _unmask(d_weights, params).reshape(params.values.shape)
            grads.bias[layer.name] = d_out.sum(axis=(0, 2))
            if need_input_grad:
                d_cols = np.matmul(params.lowered().T, d_out)
                if params.fiber_mask is not None:
                    full = np.zeros((d_cols.shape[0], params.fiber_count, d_cols.shape[2]))
                    full[:, params.fiber_mask, :] = d_cols
                    d_cols = full
                grad = col2im(d_cols, x.shape, spec.kernel, spec.stride, spec.pad)
        elif kind is LayerKind.RELU:
            grad = grad * aux
        elif kind is LayerKind.MAX_POOL:
            winners, cols_shape = aux
            spec = layer.spec
            batch, channels, height, width = x.shape
            d_cols = np.zeros(cols_shape)
            np.put_along_axis(
                d_cols, winners[:, np.newaxis, :],
                grad.reshape(batch * channels, 1, -1), axis=1,
            )
            grad = col2im(d_cols, (batch * channels, 1, height, width),
                          spec.kernel, spec.stride, spec.pad).reshape(x.shape)
        elif kind is LayerKind.BLOCK_END:
            shortcut_grads.append(grad)
        elif kind is LayerKind.BLOCK_BEGIN:
            grad = grad + shortcut_grads.pop()

    return grads


def _unmask(matrix: np.ndarray, params: WeightTensor4D) -> np.ndarray:
    """Scatter columns computed over surviving fibers back to full width."""
    if params.fiber_mask is None:
        return matrix
    full = np.zeros((matrix.shape[0], params.fiber_count))
    full[:, params.fiber_mask] = matrix
    return full


def evaluate(model: NetworkModel, images: Tensor, labels: np.ndarray, batch_size: int = 500) -> Tuple[float, float]:
    """Mean loss and error rate of ``model`` over a labelled set."""
    total_loss, wrong = 0.0, 0
    for start in range(0, len(labels), batch_size):
        logits, _ = forward(model, images[start:start + batch_size])
        batch_labels = labels[start:start + batch_size]
        loss, _ = softmax_cross_entropy(logits, batch_labels)
        total_loss += loss * len(batch_labels)
        wrong += int(np.sum(logits.argmax(axis=1) != batch_labels))
    return total_loss / len(labels), wrong / len(labels)

