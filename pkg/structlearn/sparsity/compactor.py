"""Zero-group detection, physical compaction, FLOP accounting and PCA rank analysis.

Compaction is defined against a *hard-zeroed* reference: every dead group of
the trained model is set exactly to zero (``hard_zero``), and the compacted
model (``apply_plan``) must compute the same function as that reference.

Each weighted layer is viewed as ``(N, C, P)``: N filters (or output units),
C channels and P positions per channel. For a conv layer P = M*K. For an FC
layer fed by a (C, H, W) activation P = H*W, and for an FC layer fed by a
vector C is the fan-in and P = 1. Shape fibers are the C*P columns.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Sequence, Set, Tuple, Union

import numpy as np

from .errors import ConfigError, StructuralError
from .network import Layer, LayerKind, NetworkModel, WeightTensor4D
from .regularizer import SslConfig, is_dead
from .tensor import lower_weights

logger = logging.getLogger(__name__)


def pack_mask(mask: np.ndarray) -> str:
    return np.packbits(np.asarray(mask, dtype=bool)).tobytes().hex()


def unpack_mask(packed: str, length: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(packed), dtype=np.uint8))
    if len(bits) < length:
        raise StructuralError(f"Packed mask holds {len(bits)} bits, expected {length}")
    return bits[:length].astype(bool)


@dataclass
class LayerPlan:
    """What survives of one weighted layer.

    ``keep_filters`` and ``keep_channels`` index the original layer of
    ``n_filters`` filters and ``n_channels`` channels; ``fiber_mask`` covers
    all C*P original fibers. ``dead_*`` list the groups that ``hard_zero``
    sets to zero. ``folded`` holds ``(channel, value)`` pairs: removed input
    channels that carried the constant ``value``, to be folded into this
    layer's bias.
    """
    name: str
    kind: LayerKind
    n_filters: int
    n_channels: int
    keep_filters: np.ndarray
    keep_channels: np.ndarray
    fiber_mask: np.ndarray
    keep_layer: bool = True
    dead_filters: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dead_channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    folded: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.keep_filters = np.asarray(self.keep_filters, dtype=np.int64)
        self.keep_channels = np.asarray(self.keep_channels, dtype=np.int64)
        self.fiber_mask = np.asarray(self.fiber_mask, dtype=bool)
        self.dead_filters = np.asarray(self.dead_filters, dtype=np.int64)
        self.dead_channels = np.asarray(self.dead_channels, dtype=np.int64)
        self.folded = tuple((int(c), float(v)) for c, v in self.folded)

    @property
    def is_identity(self) -> bool:
        return (self.keep_layer and not self.folded and not len(self.dead_filters)
                and not len(self.dead_channels) and bool(self.fiber_mask.all())
                and len(self.keep_filters) == self.n_filters and len(self.keep_channels) == self.n_channels)

    def to_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'n_filters': self.n_filters,
            'n_channels': self.n_channels,
            'keep_filters': self.keep_filters.tolist(),
            'keep_channels': self.keep_channels.tolist(),
            'fibers': len(self.fiber_mask),
            'fiber_mask': pack_mask(self.fiber_mask),
            'keep_layer': self.keep_layer,
            'dead_filters': self.dead_filters.tolist(),
            'dead_channels': self.dead_channels.tolist(),
            'folded': [[c, v] for c, v in self.folded],
        }

    @classmethod
    def from_dict(cls, name: str, data: dict) -> 'LayerPlan':
        return cls(
            name=name,
            kind=data['kind'],
            n_filters=data['n_filters'],
            n_channels=data['n_channels'],
            keep_filters=data['keep_filters'],
            keep_channels=data['keep_channels'],
            fiber_mask=unpack_mask(data['fiber_mask'], data['fibers']),
            keep_layer=data.get('keep_layer', True),
            dead_filters=data.get('dead_filters', []),
            dead_channels=data.get('dead_channels', []),
            folded=tuple(tuple(pair) for pair in data.get('folded', [])),
        )


@dataclass
class CompactPlan:
    layers: Dict[str, LayerPlan]
    removed_blocks: Tuple[str, ...] = ()

    @property
    def is_identity(self) -> bool:
        return not self.removed_blocks and all(plan.is_identity for plan in self.layers.values())

    def to_dict(self) -> dict:
        return {
            'layers': {name: plan.to_dict() for name, plan in self.layers.items()},
            'removed_blocks': list(self.removed_blocks),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CompactPlan':
        return cls(
            layers={name: LayerPlan.from_dict(name, entry) for name, entry in data['layers'].items()},
            removed_blocks=tuple(data.get('removed_blocks', ())),
        )


@dataclass(frozen=True)
class LayerFlops:
    name: str
    before: int
    after: int
    after_2d: int

    @property
    def ratio(self) -> float:
        return self.after / self.before if self.before else 1.0

    @property
    def ratio_2d(self) -> float:
        return self.after_2d / self.before if self.before else 1.0


@dataclass(frozen=True)
class FlopReport:
    """FLOPs per sample, one multiply-add counted as two operations."""
    layers: Tuple[LayerFlops, ...]

    @property
    def total_before(self) -> int:
        return sum(layer.before for layer in self.layers)

    @property
    def total_after(self) -> int:
        return sum(layer.after for layer in self.layers)

    @property
    def ratio(self) -> float:
        return self.total_after / self.total_before if self.total_before else 1.0

    def layer(self, name: str) -> LayerFlops:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


@dataclass(frozen=True)
class LayerStructure:
    name: str
    kind: LayerKind
    filters: int
    channels: int
    fibers: int
    fibers_per_channel: float
    row_sparsity: float
    column_sparsity: float


def channel_view(layer: Layer, input_shape) -> Tuple[int, int]:
    """(C, P) of a weighted layer given its input activation shape."""
    params = layer.params
    if layer.kind is LayerKind.CONV:
        return params.n_channels, params.height * params.width
    if len(input_shape) == 3:
        return input_shape[0], input_shape[1] * input_shape[2]
    return params.n_channels, 1


def _grouped(params: WeightTensor4D, view: Tuple[int, int]) -> np.ndarray:
    return params.values.reshape(params.n_filters, view[0], view[1])


def _threshold(cfg: Union[SslConfig, float]) -> float:
    threshold = cfg.zero_threshold if isinstance(cfg, SslConfig) else float(cfg)
    if threshold < 0:
        raise ConfigError("`zero_threshold` must be non-negative")
    return threshold


def _blocks(model: NetworkModel) -> List[Tuple[int, int]]:
    stack, pairs = [], []
    for index, layer in enumerate(model.layers):
        if layer.kind is LayerKind.BLOCK_BEGIN:
            stack.append(index)
        elif layer.kind is LayerKind.BLOCK_END:
            pairs.append((stack.pop(), index))
    return sorted(pairs)


def _dead_blocks(model: NetworkModel, threshold: float) -> Tuple[Set[int], Tuple[str, ...]]:
    """Blocks whose inner path ends in an all-zero layer (weights and bias) are identities."""
    removed, names = set(), []
    for begin, end in _blocks(model):
        if begin in removed:
            continue
        inner = [i for i in range(begin + 1, end) if model.layers[i].kind.weighted]
        if not inner:
            continue
        last = inner[-1]
        tail = [model.layers[i].kind for i in range(last + 1, end)]
        if any(kind not in (LayerKind.RELU, LayerKind.MAX_POOL) for kind in tail):
            continue
        params = model.layers[last].params
        if is_dead(np.abs(params.param_vector()).max(), threshold):
            removed.update(range(begin, end + 1))
            names.append(model.layers[begin].spec.shortcut_id)
    return removed, tuple(names)


def _links(model: NetworkModel, removed: Set[int]):
    """Yield (producer, consumer, path) for weighted pairs joined only by ReLU / max-pool layers."""
    for i, layer in enumerate(model.layers):
        if not layer.kind.weighted or i in removed:
            continue
        path = []
        for j in range(i + 1, len(model.layers)):
            if j in removed:
                continue
            nxt = model.layers[j]
            if nxt.kind in (LayerKind.RELU, LayerKind.MAX_POOL):
                path.append(nxt)
            elif nxt.kind.weighted:
                yield layer, nxt, path
                break
            else:
                break


def _constant_through(path: Sequence[Layer], value: float) -> float:
    for layer in path:
        if layer.kind is LayerKind.RELU:
            value = max(value, 0.0)
    return value


def _foldable(consumer: Layer, path: Sequence[Layer]) -> bool:
    if any(layer.kind is LayerKind.MAX_POOL and tuple(layer.spec.pad) != (0, 0) for layer in path):
        return False
    return consumer.kind is LayerKind.FC or tuple(consumer.spec.pad) == (0, 0)


def detect_zero_groups(model: NetworkModel, cfg: Union[SslConfig, float]) -> CompactPlan:
    """Build a consistent compaction plan from the dead groups of ``model``.

    A group is dead when its max-abs weight is below ``cfg.zero_threshold``
    (a tie is kept) or exactly zero. Dead filters of a layer and dead channels
    of the layer it feeds are removed together when the two are joined only by
    ReLU / max-pool layers. A removed filter whose constant output ``act(bias)``
    is nonzero is folded into the consumer's bias when that is exact, and kept
    otherwise. Dead channels and fibers that cannot be removed are masked out
    of the lowered weight matrix. A residual block whose last inner layer is
    entirely dead is removed.

    Raises:
        StructuralError: every filter of a layer not bridged by a shortcut would be removed.
    """
    threshold = _threshold(cfg)
    shapes = model.layer_shapes()
    removed_positions, removed_blocks = _dead_blocks(model, threshold)

    plans = {}
    for index, layer in enumerate(model.layers):
        if not layer.kind.weighted:
            continue
        params = layer.params
        view = channel_view(layer, shapes[index][0])
        magnitude = np.abs(_grouped(params, view))
        dead_fibers = is_dead(magnitude.max(axis=0).ravel(), threshold)
        if params.fiber_mask is not None:
            dead_fibers |= ~params.fiber_mask
        plans[layer.name] = LayerPlan(
            name=layer.name,
            kind=layer.kind,
            n_filters=params.n_filters,
            n_channels=view[0],
            keep_filters=np.arange(params.n_filters),
            keep_channels=np.arange(view[0]),
            fiber_mask=~dead_fibers,
            keep_layer=index not in removed_positions,
            dead_filters=np.flatnonzero(is_dead(magnitude.max(axis=(1, 2)), threshold)),
            dead_channels=np.flatnonzero(is_dead(magnitude.max(axis=(0, 2)), threshold)),
        )

    for producer, consumer, path in _links(model, removed_positions):
        p_plan, c_plan = plans[producer.name], plans[consumer.name]
        dead_channels = set(c_plan.dead_channels.tolist())
        removal = set(p_plan.dead_filters.tolist()) | dead_channels
        folded = {}
        for n in sorted(removal - dead_channels):
            value = _constant_through(path, float(producer.params.bias[n]))
            if value == 0.0:
                continue
            if _foldable(consumer, path):
                folded[n] = value
            else:
                logger.warning("Keeping filter %s of %s: its constant output cannot be folded exactly",
                               n, producer.name)
                removal.discard(n)

        if len(removal) == producer.params.n_filters:
            if model.block_of(producer.name) is None:
                raise StructuralError(f"Compaction would remove every filter of layer {producer.name!r}")
            spared = min(removal)
            removal.discard(spared)
            folded.pop(spared, None)

        survivors = np.array(sorted(set(range(producer.params.n_filters)) - removal), dtype=np.int64)
        p_plan.keep_filters = survivors
        c_plan.keep_channels = survivors
        c_plan.folded = tuple(sorted(folded.items()))

    plan = CompactPlan(plans, removed_blocks)
    logger.info({
        "message": "Compaction plan built.",
        "zero_threshold": threshold,
        "removed_blocks": list(removed_blocks),
        "filters": {name: [len(p.keep_filters), p.n_filters] for name, p in plans.items() if p.keep_layer},
        "fibers": {name: int(p.fiber_mask.sum()) for name, p in plans.items() if p.keep_layer},
    })
    return plan


def _check_plan(model: NetworkModel, plan: CompactPlan):
    shapes = model.layer_shapes()
    names = {layer.name for layer in model.weighted_layers}
    if set(plan.layers) != names:
        raise StructuralError(f"Plan covers layers {sorted(plan.layers)}, model has {sorted(names)}")
    for index, layer in enumerate(model.layers):
        if not layer.kind.weighted:
            continue
        lp, params = plan.layers[layer.name], layer.params
        c_view, p = channel_view(layer, shapes[index][0])
        if (lp.n_filters, lp.n_channels) != (params.n_filters, c_view):
            raise StructuralError(
                f"Plan for {layer.name!r} expects {lp.n_filters}x{lp.n_channels} filters x channels, "
                f"layer has {params.n_filters}x{c_view}"
            )
        if len(lp.fiber_mask) != c_view * p:
            raise StructuralError(f"Fiber mask of {layer.name!r} has {len(lp.fiber_mask)} entries, expected {c_view * p}")
        for label, keep, extent in (('filter', lp.keep_filters, params.n_filters), ('channel', lp.keep_channels, c_view)):
            if lp.keep_layer and not len(keep):
                raise StructuralError(f"Plan removes every {label} of layer {layer.name!r}")
            if len(keep) and (keep.min() < 0 or keep.max() >= extent or np.any(np.diff(keep) <= 0)):
                raise StructuralError(f"Invalid {label} indices for layer {layer.name!r}")
        if any(not 0 <= c < c_view for c, _ in lp.folded):
            raise StructuralError(f"Folded channel out of range for layer {layer.name!r}")


def _removed_positions(model: NetworkModel, plan: CompactPlan) -> Set[int]:
    removed = set()
    for begin, end in _blocks(model):
        if model.layers[begin].spec.shortcut_id in plan.removed_blocks:
            removed.update(range(begin, end + 1))
    return removed


def hard_zero(model: NetworkModel, plan: CompactPlan) -> NetworkModel:
    """Copy of ``model`` with every dead group of ``plan`` set exactly to zero.

    Layers of removed blocks lose their weights and biases; elsewhere biases are kept.
    """
    _check_plan(model, plan)
    out = model.copy()
    shapes = out.layer_shapes()
    for index, layer in enumerate(out.layers):
        if not layer.kind.weighted:
            continue
        lp, params = plan.layers[layer.name], layer.params
        if not lp.keep_layer:
            params.values = np.zeros_like(params.values)
            params.bias = np.zeros_like(params.bias)
            continue
        grouped = _grouped(params, channel_view(layer, shapes[index][0])).copy()
        grouped[lp.dead_filters] = 0.0
        grouped[:, lp.dead_channels] = 0.0
        flat = grouped.reshape(params.n_filters, -1)
        flat[:, ~lp.fiber_mask] = 0.0
        params.values = flat.reshape(params.values.shape)
    return out


def _compact_layer(layer: Layer, lp: LayerPlan, view: Tuple[int, int]) -> Layer:
    params = layer.params
    grouped = _grouped(params, view)
    bias = params.bias.copy()
    for channel, value in lp.folded:
        bias += value * grouped[:, channel, :].sum(axis=1)

    kept = grouped[lp.keep_filters][:, lp.keep_channels]
    mask = lp.fiber_mask.reshape(view)[lp.keep_channels].ravel()
    n_out, n_in = len(lp.keep_filters), len(lp.keep_channels)
    if layer.kind is LayerKind.CONV:
        values = kept.reshape(n_out, n_in, params.height, params.width)
    else:
        values = kept.reshape(n_out, n_in * view[1], 1, 1)

    spec = layer.spec
    if n_out != spec.n_out:
        spec = replace(spec, n_out=n_out)
    return Layer(spec, WeightTensor4D(values, bias[lp.keep_filters], None if mask.all() else mask))


def apply_plan(model: NetworkModel, plan: CompactPlan) -> NetworkModel:
    """Physically smaller model computing the same function as ``hard_zero(model, plan)``."""
    reference = hard_zero(model, plan)
    shapes = reference.layer_shapes()
    removed = _removed_positions(reference, plan)
    layers = []
    for index, layer in enumerate(reference.layers):
        if index in removed:
            continue
        if layer.kind.weighted:
            if not plan.layers[layer.name].keep_layer:
                raise StructuralError(f"Layer {layer.name!r} is dropped but no enclosing block is removed")
            layer = _compact_layer(layer, plan.layers[layer.name], channel_view(layer, shapes[index][0]))
        layers.append(layer)

    try:
        compacted = NetworkModel(input_shape=reference.input_shape, layers=layers, name=reference.name)
    except (ConfigError, ValueError) as e:
        raise StructuralError(f"Plan is inconsistent with the model: {e}") from e

    logger.info({
        "message": "Model compacted.",
        "parameters_before": model.parameter_count,
        "parameters_after": compacted.parameter_count,
        "removed_blocks": list(plan.removed_blocks),
    })
    return compacted


def neuron_compact(model: NetworkModel, plan: CompactPlan) -> NetworkModel:
    """``apply_plan`` restricted to fully connected networks.

    Dummy neurons (no outgoing connections) are removed and zero-input neurons
    degenerate to a constant that is folded into the next layer's bias.
    """
    conv = [layer.name for layer in model.weighted_layers if layer.kind is not LayerKind.FC]
    if conv:
        raise StructuralError(f"Neuron compaction applies to FC layers only, found {conv}")
    return apply_plan(model, plan)


def _layer_flops(layer: Layer, output_shape) -> Tuple[int, int]:
    """(FLOPs, FLOPs counting only fibers whose 2-D kernel is nonzero)."""
    params = layer.params
    positions = int(np.prod(output_shape[1:])) if layer.kind is LayerKind.CONV else 1
    mask = np.ones(params.fiber_count, dtype=bool) if params.fiber_mask is None else params.fiber_mask
    flops = 2 * params.n_filters * int(mask.sum()) * positions

    kernel_alive = np.abs(params.values).max(axis=(2, 3)) > 0
    per_fiber = np.repeat(kernel_alive, params.height * params.width, axis=1)
    flops_2d = 2 * int(per_fiber[:, mask].sum()) * positions
    return flops, flops_2d


def flop_report(model_before: NetworkModel, model_after: NetworkModel) -> FlopReport:
    """Per-layer FLOPs of two versions of a model; layers missing after compaction count as zero."""
    after = {}
    for layer, (_, out_shape) in zip(model_after.layers, model_after.layer_shapes()):
        if layer.kind.weighted:
            after[layer.name] = _layer_flops(layer, out_shape)

    entries = []
    for layer, (_, out_shape) in zip(model_before.layers, model_before.layer_shapes()):
        if not layer.kind.weighted:
            continue
        before, _ = _layer_flops(layer, out_shape)
        flops, flops_2d = after.get(layer.name, (0, 0))
        entries.append(LayerFlops(layer.name, before, flops, flops_2d))
    return FlopReport(tuple(entries))


def structure_summary(model: NetworkModel, zero_threshold: float = 0.0) -> List[LayerStructure]:
    """Filters, channels, surviving fibers and row/column sparsity of each weighted layer.

    ``fibers`` is the total count of surviving shape fibers; ``fibers_per_channel``
    divides it by the channels that keep at least one fiber.
    """
    summary = []
    for layer, (in_shape, _) in zip(model.layers, model.layer_shapes()):
        if not layer.kind.weighted:
            continue
        params = layer.params
        view = channel_view(layer, in_shape)
        matrix = np.abs(lower_weights(params.values))
        alive_columns = ~is_dead(matrix.max(axis=0), zero_threshold)
        if params.fiber_mask is not None:
            alive_columns &= params.fiber_mask
        dead_rows = is_dead(matrix[:, alive_columns].max(axis=1, initial=0.0), zero_threshold)
        channels_alive = alive_columns.reshape(view).any(axis=1).sum()
        fibers = int(alive_columns.sum())
        summary.append(LayerStructure(
            name=layer.name,
            kind=layer.kind,
            filters=params.n_filters,
            channels=view[0],
            fibers=fibers,
            fibers_per_channel=fibers / channels_alive if channels_alive else 0.0,
            row_sparsity=float(dead_rows.mean()),
            column_sparsity=float(1.0 - alive_columns.mean()),
        ))
    return summary


def pca_rank_analysis(w: Union[WeightTensor4D, np.ndarray], dims: Iterable[int]) -> List[Tuple[int, float]]:
    """Relative reconstruction error of the lowered weight matrix versus retained PCA dimensions.

    Rows of the lowered matrix are samples. They are centred, the covariance
    is eigendecomposed and the error at ``d`` is ``||X - X_d||_F / ||X||_F``
    where ``X_d`` is the mean plus the projection onto the top ``d``
    eigenvectors. Dimensions above ``min(N, C*M*K)`` are clamped.
    """
    x = lower_weights(w).astype(np.float64)
    limit = min(x.shape)
    mean = x.mean(axis=0)
    centred = x - mean
    eigvals, eigvecs = np.linalg.eigh(centred.T @ centred)
    eigvecs = eigvecs[:, np.argsort(eigvals)[::-1]]
    scale = np.linalg.norm(x)

    curve = []
    for d in dims:
        d = int(d)
        if d < 0:
            raise ConfigError(f"PCA dimension must be non-negative, got {d}")
        if d > limit:
            logger.warning("Clamping PCA dimension %s to the matrix rank bound %s", d, limit)
            d = limit
        basis = eigvecs[:, :d]
        residual = centred - (centred @ basis) @ basis.T
        curve.append((d, float(np.linalg.norm(residual) / scale) if scale else 0.0))
    return curve
