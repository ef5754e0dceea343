"""Named network geometries and a builder for custom layer stacks."""
import logging
from typing import Iterable, Mapping, Tuple

import numpy as np

from .errors import ConfigError
from .network import Layer, LayerKind, LayerSpec, NetworkModel, WeightTensor4D
from .tensor import as_pair, output_extent

logger = logging.getLogger(__name__)

MNIST_SHAPE = (1, 28, 28)
CIFAR10_SHAPE = (3, 32, 32)


class NetworkBuilder:
    """Append layers one at a time while tracking the running activation shape.

    Weights are drawn from a scaled uniform distribution U(-a, a) with
    a = sqrt(3 / fan_in); biases start at zero.
    """

    def __init__(self, input_shape: Tuple[int, ...], seed: int = 0):
        self.input_shape = tuple(input_shape)
        self.shape = tuple(input_shape)
        self.layers = []
        self._rng = np.random.default_rng(seed)
        self._open_blocks = []

    def _init_weights(self, shape) -> WeightTensor4D:
        fan_in = int(np.prod(shape[1:]))
        limit = np.sqrt(3.0 / fan_in)
        return WeightTensor4D(self._rng.uniform(-limit, limit, size=shape), np.zeros(shape[0]))

    def conv(self, name: str, filters: int, kernel=3, stride=1, pad=0) -> 'NetworkBuilder':
        if len(self.shape) != 3:
            raise ConfigError(f"Conv layer {name!r} must follow a spatial layer, got shape {self.shape}")
        kernel, stride, pad = as_pair(kernel), as_pair(stride), as_pair(pad)
        channels, height, width = self.shape
        params = self._init_weights((filters, channels) + kernel)
        self.layers.append(Layer(LayerSpec(LayerKind.CONV, name, filters, kernel, stride, pad), params))
        self.shape = (
            filters,
            output_extent(height, kernel[0], stride[0], pad[0]),
            output_extent(width, kernel[1], stride[1], pad[1]),
        )
        return self

    def fc(self, name: str, units: int) -> 'NetworkBuilder':
        fan_in = int(np.prod(self.shape))
        params = self._init_weights((units, fan_in, 1, 1))
        self.layers.append(Layer(LayerSpec(LayerKind.FC, name, units), params))
        self.shape = (units,)
        return self

    def relu(self, name: str = '') -> 'NetworkBuilder':
        self.layers.append(Layer(LayerSpec(LayerKind.RELU, name)))
        return self

    def pool(self, name: str = '', kernel=2, stride=2, pad=0) -> 'NetworkBuilder':
        kernel, stride, pad = as_pair(kernel), as_pair(stride), as_pair(pad)
        channels, height, width = self.shape
        self.layers.append(Layer(LayerSpec(LayerKind.MAX_POOL, name, 0, kernel, stride, pad)))
        self.shape = (
            channels,
            output_extent(height, kernel[0], stride[0], pad[0]),
            output_extent(width, kernel[1], stride[1], pad[1]),
        )
        return self

    def begin_block(self, shortcut_id: str) -> 'NetworkBuilder':
        self._open_blocks.append(shortcut_id)
        self.layers.append(Layer(LayerSpec(LayerKind.BLOCK_BEGIN, f"{shortcut_id}_begin",
                                           shortcut_id=shortcut_id)))
        return self

    def end_block(self) -> 'NetworkBuilder':
        shortcut_id = self._open_blocks.pop()
        self.layers.append(Layer(LayerSpec(LayerKind.BLOCK_END, f"{shortcut_id}_end",
                                           shortcut_id=shortcut_id)))
        return self

    def softmax(self, name: str = 'loss') -> 'NetworkBuilder':
        self.layers.append(Layer(LayerSpec(LayerKind.SOFTMAX, name)))
        return self

    def build(self, name: str = '') -> NetworkModel:
        return NetworkModel(input_shape=self.input_shape, layers=self.layers, name=name)


def lenet(seed: int = 0) -> NetworkModel:
    """Caffe LeNet: conv 20x5x5, pool, conv 50x5x5, pool, fc 500, relu, fc 10."""
    return (NetworkBuilder(MNIST_SHAPE, seed)
            .conv('conv1', 20, kernel=5).pool('pool1')
            .conv('conv2', 50, kernel=5).pool('pool2')
            .fc('fc1', 500).relu('relu1')
            .fc('fc2', 10).softmax()
            .build('lenet'))


def mlp(seed: int = 0, hidden: Iterable[int] = (500, 300)) -> NetworkModel:
    builder = NetworkBuilder(MNIST_SHAPE, seed)
    for index, units in enumerate(hidden, start=1):
        builder.fc(f"fc{index}", units).relu(f"relu{index}")
    return builder.fc(f"fc{len(tuple(hidden)) + 1}", 10).softmax().build('mlp')


def mini_resnet(seed: int = 0, blocks: int = 3, width: int = 16) -> NetworkModel:
    """Stem conv, then ``blocks`` identity-shortcut blocks of two 3x3 convs each."""
    builder = (NetworkBuilder(MNIST_SHAPE, seed)
               .conv('conv1', width, kernel=3, pad=1).relu('relu1').pool('pool1'))
    for index in range(1, blocks + 1):
        (builder.begin_block(f"res{index}")
         .conv(f"res{index}a", width, kernel=3, pad=1).relu(f"res{index}a_relu")
         .conv(f"res{index}b", width, kernel=3, pad=1)
         .end_block().relu(f"res{index}_relu"))
    return builder.pool('pool2').fc('fc1', 10).softmax().build('mini-resnet')


def convnet(seed: int = 0) -> NetworkModel:
    """Three 5x5 conv layers (32, 32, 64 filters) with 2x2 pooling and one fc layer, for CIFAR-10."""
    return (NetworkBuilder(CIFAR10_SHAPE, seed)
            .conv('conv1', 32, kernel=5, pad=2).relu('relu1').pool('pool1')
            .conv('conv2', 32, kernel=5, pad=2).relu('relu2').pool('pool2')
            .conv('conv3', 64, kernel=5, pad=2).relu('relu3').pool('pool3')
            .fc('fc1', 10).softmax()
            .build('convnet'))


PRESETS = {
    'lenet': lenet,
    'mlp': mlp,
    'mini-resnet': mini_resnet,
    'convnet': convnet,
}


def build_preset(name: str, seed: int = 0) -> NetworkModel:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"Unknown network preset {name!r}; choose one of {sorted(PRESETS)}")
    return factory(seed=seed)


def build_from_layers(input_shape, layers: Iterable[Mapping], seed: int = 0, name: str = 'custom') -> NetworkModel:
    """Build a network from config entries such as ``{'kind': 'conv', 'name': 'c1', 'filters': 8, 'kernel': 3}``."""
    builder = NetworkBuilder(tuple(input_shape), seed)
    for entry in layers:
        kind = entry.get('kind')
        layer_name = entry.get('name', '')
        if kind == 'conv':
            builder.conv(layer_name, int(entry['filters']), entry.get('kernel', 3),
                         entry.get('stride', 1), entry.get('pad', 0))
        elif kind == 'fc':
            builder.fc(layer_name, int(entry['units']))
        elif kind == 'relu':
            builder.relu(layer_name)
        elif kind == 'max_pool':
            builder.pool(layer_name, entry.get('kernel', 2), entry.get('stride', 2), entry.get('pad', 0))
        elif kind == 'residual_begin':
            builder.begin_block(entry['shortcut_id'])
        elif kind == 'residual_end':
            builder.end_block()
        elif kind == 'softmax':
            builder.softmax(layer_name or 'loss')
        else:
            raise ConfigError(f"Unknown layer kind {kind!r}")
    return builder.build(name)
