"""Group Lasso structured sparsity: group definitions, values, gradients and statistics.

Every weighted layer exposes a flat parameter vector (weights in (N, C, M, K)
row-major order, followed by the bias). A group is a set of flat indices into
that vector; the group Lasso of a set of groups is the sum of their l2 norms.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError
from .network import Gradients, Layer, LayerKind, NetworkModel

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
DEFAULT_ZERO_THRESHOLD = 1e-4
# live groups are expected to sit this far above the zero threshold
GAP_FACTOR = 100.0


class SchemeKind(Enum):
    FILTER_WISE = 'filter_wise'
    CHANNEL_WISE = 'channel_wise'
    SHAPE_WISE = 'shape_wise'
    DEPTH_WISE = 'depth_wise'
    FILTER_2D_WISE = 'filter2d_wise'
    ROW_COLUMN = 'row_column'
    NEURON_WISE_IN = 'neuron_wise_in'
    NEURON_WISE_OUT = 'neuron_wise_out'


NEURON_SCHEMES = (SchemeKind.NEURON_WISE_IN, SchemeKind.NEURON_WISE_OUT)


@dataclass(frozen=True, eq=False)
class GroupIndexSet:
    """One group: flat indices into the parameter vector of layer ``layer_id``.

    ``key`` names the group inside its layer, e.g. ``('filter', 3)`` or
    ``('fiber', 17)``.
    """
    layer_id: str
    member_indices: np.ndarray
    key: Tuple[str, int] = ('group', 0)

    @property
    def size(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class GroupingScheme:
    """A grouping kind, its strength and the layers it applies to.

    ``layers=None`` selects the default layers of the kind: every conv layer
    for the conv schemes, every FC layer for the neuron schemes, and every conv
    layer inside a residual block (except the first conv of the network) for
    DEPTH_WISE. ``column_strength`` overrides the strength of the column half
    of ROW_COLUMN.
    """
    kind: SchemeKind
    strength: float = 0.0
    layers: Optional[Tuple[str, ...]] = None
    column_strength: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.kind, SchemeKind):
            try:
                object.__setattr__(self, 'kind', SchemeKind(self.kind))
            except ValueError:
                raise ConfigError(f"Unknown grouping scheme {self.kind!r}")
        if self.strength < 0 or (self.column_strength is not None and self.column_strength < 0):
            raise ConfigError(f"Strength of {self.kind.value} must be non-negative")
        if self.layers is not None:
            object.__setattr__(self, 'layers', tuple(self.layers))

    def select(self, model: NetworkModel) -> List[Layer]:
        """Layers this scheme regularizes in ``model``."""
        if self.kind is SchemeKind.DEPTH_WISE:
            selected = self._select_depth(model)
        elif self.layers is None:
            wanted = LayerKind.FC if self.kind in NEURON_SCHEMES else LayerKind.CONV
            selected = [layer for layer in model.layers if layer.kind is wanted]
        else:
            selected = [model.layer(name) for name in self.layers]
            for layer in selected:
                if not layer.kind.weighted:
                    raise ConfigError(f"{self.kind.value} cannot regularize {layer.kind.value} layer {layer.name!r}")
                if self.kind in NEURON_SCHEMES and layer.kind is not LayerKind.FC:
                    raise ConfigError(f"{self.kind.value} applies to FC layers only, not {layer.name!r}")

        if not selected:
            raise ConfigError(f"Scheme {self.kind.value} selects no layer of {model.name or 'the model'}")
        return selected

    def _select_depth(self, model: NetworkModel) -> List[Layer]:
        if not any(layer.kind is LayerKind.BLOCK_BEGIN for layer in model.layers):
            raise ConfigError("Depth-wise sparsity needs residual shortcuts; the model has none")
        first_conv = next((layer.name for layer in model.layers if layer.kind is LayerKind.CONV), None)
        bridged = [
            layer for layer in model.weighted_layers
            if layer.kind is LayerKind.CONV and layer.name != first_conv and model.block_of(layer.name)
        ]
        if self.layers is None:
            return bridged
        bridged_names = {layer.name for layer in bridged}
        for name in self.layers:
            if name not in bridged_names:
                raise ConfigError(f"Depth-wise layer {name!r} is not bridged by an identity shortcut")
        return [model.layer(name) for name in self.layers]


@dataclass(frozen=True)
class SslConfig:
    schemes: Tuple[GroupingScheme, ...]
    epsilon: float = DEFAULT_EPSILON
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD
    couple_filter_channel: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'schemes', tuple(self.schemes))
        if not self.schemes:
            raise ConfigError("SSL needs at least one grouping scheme")
        if not self.epsilon > 0:
            raise ConfigError("`epsilon` must be positive")
        if self.zero_threshold < 0:
            raise ConfigError("`zero_threshold` must be non-negative")

    def effective_schemes(self) -> Tuple[GroupingScheme, ...]:
        """Configured schemes, plus the filter/channel partner when coupling is on."""
        if not self.couple_filter_channel:
            return self.schemes
        kinds = {scheme.kind for scheme in self.schemes}
        partners = {SchemeKind.FILTER_WISE: SchemeKind.CHANNEL_WISE,
                    SchemeKind.CHANNEL_WISE: SchemeKind.FILTER_WISE}
        extra = tuple(
            replace(scheme, kind=partners[scheme.kind])
            for scheme in self.schemes
            if scheme.kind in partners and partners[scheme.kind] not in kinds
        )
        return self.schemes + extra


@dataclass(frozen=True, eq=False)
class RegularizerTerm:
    """Groups of one scheme (or one half of ROW_COLUMN) stacked per layer.

    Each block is ``(layer_id, axis_label, index_matrix)`` with one group per
    row of the index matrix.
    """
    label: str
    kind: SchemeKind
    strength: float
    blocks: Tuple[Tuple[str, str, np.ndarray], ...] = field(default=())

    def groups(self) -> List[GroupIndexSet]:
        return [
            GroupIndexSet(layer_id, row, (axis, i))
            for layer_id, axis, matrix in self.blocks
            for i, row in enumerate(matrix)
        ]


@dataclass(frozen=True)
class SparsityRecord:
    scheme: str
    layer: str
    n_groups: int
    n_zero: int
    n_gap: int = 0

    @property
    def fraction(self) -> float:
        return self.n_zero / self.n_groups if self.n_groups else 0.0


def _index_blocks(kind: SchemeKind, shape) -> List[Tuple[str, np.ndarray]]:
    """Per-kind index matrices over a layer of weight shape (N, C, M, K)."""
    n, c, m, k = shape
    index = np.arange(n * c * m * k).reshape(n, c, m, k)
    filters = index.reshape(n, -1)
    channels = index.transpose(1, 0, 2, 3).reshape(c, -1)
    fibers = filters.T.copy()

    if kind is SchemeKind.FILTER_WISE:
        return [('filter', filters)]
    if kind is SchemeKind.CHANNEL_WISE:
        return [('channel', channels)]
    if kind is SchemeKind.SHAPE_WISE:
        return [('fiber', fibers)]
    if kind is SchemeKind.FILTER_2D_WISE:
        return [('kernel2d', index.reshape(n * c, m * k))]
    if kind is SchemeKind.DEPTH_WISE:
        return [('layer', np.arange(n * c * m * k + n)[np.newaxis, :])]
    if kind is SchemeKind.ROW_COLUMN:
        return [('row', filters), ('column', fibers)]
    if kind is SchemeKind.NEURON_WISE_IN:
        return [('input_unit', channels)]
    if kind is SchemeKind.NEURON_WISE_OUT:
        return [('output_unit', filters)]
    raise ConfigError(f"Unhandled scheme {kind}")


def enumerate_groups(scheme: GroupingScheme, model: NetworkModel) -> List[GroupIndexSet]:
    """All groups ``scheme`` defines on ``model``, layer by layer."""
    groups = []
    for layer in scheme.select(model):
        for axis, matrix in _index_blocks(scheme.kind, layer.params.values.shape):
            groups.extend(GroupIndexSet(layer.name, row, (axis, i)) for i, row in enumerate(matrix))
    return groups


def build_terms(model: NetworkModel, cfg: SslConfig) -> List[RegularizerTerm]:
    """Stack the groups of every effective scheme once, for repeated evaluation."""
    terms = []
    for scheme in cfg.effective_schemes():
        layers = scheme.select(model)
        if scheme.kind is SchemeKind.ROW_COLUMN:
            column_strength = scheme.strength if scheme.column_strength is None else scheme.column_strength
            halves = [('rows', 0, scheme.strength), ('columns', 1, column_strength)]
        else:
            halves = [(None, 0, scheme.strength)]

        for suffix, position, strength in halves:
            blocks = tuple(
                (layer.name,) + _index_blocks(scheme.kind, layer.params.values.shape)[position]
                for layer in layers
            )
            label = scheme.kind.value if suffix is None else f"{scheme.kind.value}/{suffix}"
            terms.append(RegularizerTerm(label, scheme.kind, strength, blocks))
    return terms


def param_vectors(model: NetworkModel) -> Dict[str, np.ndarray]:
    return {layer.name: layer.params.param_vector() for layer in model.weighted_layers}


def _vectors(w: Union[NetworkModel, Mapping[str, np.ndarray]]) -> Mapping[str, np.ndarray]:
    return param_vectors(w) if isinstance(w, NetworkModel) else w


def _stack(groups) -> List[Tuple[str, np.ndarray]]:
    buckets = defaultdict(list)
    for group in groups:
        buckets[(group.layer_id, group.size)].append(np.asarray(group.member_indices))
    return [(layer_id, np.stack(rows)) for (layer_id, _), rows in buckets.items()]


def _norms(vector: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return np.sqrt(np.square(vector[matrix]).sum(axis=1))


def group_lasso_value(w, groups) -> float:
    """Sum over ``groups`` of the l2 norm of the grouped weights."""
    vectors = _vectors(w)
    return float(sum(_norms(vectors[layer_id], matrix).sum() for layer_id, matrix in _stack(groups)))


def _accumulate_grad(grads: Dict[str, np.ndarray], vectors, layer_id: str, matrix: np.ndarray,
                     epsilon: float, scale: float = 1.0):
    vector = vectors[layer_id]
    values = vector[matrix]
    norms = np.sqrt(np.square(values).sum(axis=1))
    if layer_id not in grads:
        grads[layer_id] = np.zeros_like(vector)
    np.add.at(grads[layer_id], matrix, scale * values / np.maximum(norms, epsilon)[:, np.newaxis])


def group_lasso_grad(w, groups, epsilon: float = DEFAULT_EPSILON) -> Dict[str, np.ndarray]:
    """Stabilized gradient ``w_i / max(||w_g||, epsilon)`` summed over the groups holding ``w_i``.

    Returns:
        A dict mapping each layer id touched by ``groups`` to a gradient over its
        flat parameter vector.
    """
    if not epsilon > 0:
        raise ConfigError("`epsilon` must be positive")
    vectors = _vectors(w)
    grads = {}
    for layer_id, matrix in _stack(groups):
        _accumulate_grad(grads, vectors, layer_id, matrix, epsilon)
    return grads


def regularizer_grads(model: NetworkModel, cfg: SslConfig, terms: List[RegularizerTerm] = None) -> Gradients:
    """Sum of ``strength * group_lasso_grad`` over all terms, split into weight and bias parts."""
    terms = build_terms(model, cfg) if terms is None else terms
    vectors = param_vectors(model)
    flat = {}
    for term in terms:
        if term.strength == 0:
            continue
        for layer_id, _, matrix in term.blocks:
            _accumulate_grad(flat, vectors, layer_id, matrix, cfg.epsilon, term.strength)

    grads = Gradients(weights={}, bias={})
    for layer_id, vector in flat.items():
        params = model.layer(layer_id).params
        grads.weights[layer_id] = vector[:params.values.size].reshape(params.values.shape)
        grads.bias[layer_id] = vector[params.values.size:]
    return grads


def ssl_objective(model: NetworkModel, data_loss: float, cfg: Optional[SslConfig],
                  weight_decay: float = 0.0, terms: List[RegularizerTerm] = None) -> Tuple[float, Dict[str, float]]:
    """Total objective ``E_D + weight_decay * 1/2 ||W||^2 + sum_g strength_g * R_g``.

    Returns:
        The total and a breakdown keyed by ``'data'``, ``'weight_decay'`` and each
        regularizer term label.
    """
    breakdown = {'data': float(data_loss)}
    breakdown['weight_decay'] = 0.5 * weight_decay * float(
        sum(np.square(layer.params.values).sum() for layer in model.weighted_layers)
    )
    if cfg is not None:
        terms = build_terms(model, cfg) if terms is None else terms
        vectors = param_vectors(model)
        for term in terms:
            value = sum(_norms(vectors[layer_id], matrix).sum() for layer_id, _, matrix in term.blocks)
            breakdown[term.label] = breakdown.get(term.label, 0.0) + term.strength * float(value)
    return sum(breakdown.values()), breakdown


def is_dead(max_abs: np.ndarray, zero_threshold: float) -> np.ndarray:
    """A group is dead when all its weights are exactly zero or its max-abs is below the threshold."""
    return (max_abs < zero_threshold) | (max_abs == 0)


def sparsity_stats(model: NetworkModel, cfg: SslConfig) -> List[SparsityRecord]:
    """Count dead groups per scheme and layer; ROW_COLUMN rows and columns are reported separately.

    ``n_gap`` counts live groups whose max-abs is still below
    ``GAP_FACTOR * zero_threshold``. After a converged SSL run it should be zero.
    """
    records = []
    for label, layer_id, max_abs in group_max_abs(model, cfg):
        dead = is_dead(max_abs, cfg.zero_threshold)
        gap = ~dead & (max_abs < GAP_FACTOR * cfg.zero_threshold)
        records.append(SparsityRecord(label, layer_id, len(dead), int(dead.sum()), int(gap.sum())))
    return records


def group_max_abs(model: NetworkModel, cfg: SslConfig) -> List[Tuple[str, str, np.ndarray]]:
    """Max-abs weight of every group, as ``(term label, layer id, values)`` per scheme and layer."""
    vectors = param_vectors(model)
    return [
        (term.label, layer_id, np.abs(vectors[layer_id][matrix]).max(axis=1))
        for term in build_terms(model, cfg)
        for layer_id, _, matrix in term.blocks
    ]
