from copy import deepcopy
from types import SimpleNamespace

import numpy as np
import pytest

from structlearn.sparsity.errors import ConfigError, TrainingDiverged
from structlearn.sparsity.network import (Gradients, Layer, LayerKind, LayerSpec, NetworkModel, WeightTensor4D,
                                         models_equal)
from structlearn.sparsity.presets import build_from_layers
from structlearn.sparsity.regularizer import GroupingScheme, SchemeKind, SslConfig
from structlearn.sparsity.training import TrainConfig, sgd_step, train
from .test_data import TEST_DATA


def scalar_model(value):
    params = WeightTensor4D(np.full((1, 1, 1, 1), value), np.zeros(1))
    return NetworkModel((1,), [Layer(LayerSpec(LayerKind.FC, 'w', 1), params)])


def xor_dataset(copies=16):
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    x, y = np.tile(x, (copies, 1)), np.tile(y, copies)
    return SimpleNamespace(train_images=x, train_labels=y, test_images=x[:4], test_labels=y[:4])


def toy_dataset(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 6, 6)).astype(np.float32)
    y = (x[:, 0, :3].sum(axis=(1, 2)) > 0).astype(np.int64)
    return SimpleNamespace(train_images=x, train_labels=y, test_images=x[:8], test_labels=y[:8])


def synthetic_model(seed=0):
    network = deepcopy(TEST_DATA['synthetic_experiment']['network'])
    return build_from_layers(network['input_shape'], network['layers'], seed=seed)


# ----- TrainConfig ----- #
def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule=[(2, 0.1), (1, 0.5)])


def test_rate_schedule_uses_latest_entry():
    cfg = TrainConfig(learning_rate=0.1, lr_schedule=[[2, 0.5], [4, 0.1]])

    assert [cfg.rate_at(epoch) for epoch in range(6)] == pytest.approx([0.1, 0.1, 0.05, 0.05, 0.01, 0.01])
    assert cfg.scaled(0.1).learning_rate == pytest.approx(0.01)


# ----- sgd_step ----- #
def test_zero_gradients_leave_model_unchanged():
    model = scalar_model(2.0)
    before = model.copy()
    zero = Gradients({'w': np.zeros((1, 1, 1, 1))}, {'w': np.zeros(1)})
    sgd_step(model, zero, None, TrainConfig(weight_decay=0.0))

    assert models_equal(model, before)


@pytest.mark.parametrize('lr', [0.1, 1.0, 1.9])
def test_step_descends_quadratic(lr):
    model = scalar_model(3.0)
    grads = Gradients({'w': model.layer('w').params.values.copy()}, {'w': np.zeros(1)})
    sgd_step(model, grads, None, TrainConfig(momentum=0.0, weight_decay=0.0), learning_rate=lr)
    w = model.layer('w').params.values.item()

    assert 0.5 * w ** 2 < 0.5 * 3.0 ** 2


def test_weight_decay_skips_bias():
    model = scalar_model(1.0)
    model.layer('w').params.bias = np.ones(1)
    zero = Gradients({}, {})
    sgd_step(model, zero, None, TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5))
    params = model.layer('w').params

    assert params.values.item() == pytest.approx(0.95)
    assert params.bias.item() == 1.0


def test_momentum_accumulates():
    model = scalar_model(0.0)
    grads = Gradients({'w': np.ones((1, 1, 1, 1))}, {'w': np.zeros(1)})
    cfg = TrainConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
    sgd_step(model, grads, None, cfg)
    sgd_step(model, grads, None, cfg)

    assert model.layer('w').params.values.item() == pytest.approx(-0.1 - 0.15)


def test_regularizer_gradient_is_added():
    model = scalar_model(0.0)
    reg = Gradients({'w': np.full((1, 1, 1, 1), 2.0)}, {'w': np.zeros(1)})
    sgd_step(model, Gradients({}, {}), reg, TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0))

    assert model.layer('w').params.values.item() == pytest.approx(-0.2)


def test_masked_fibers_are_never_updated():
    params = WeightTensor4D(np.zeros((2, 3, 1, 1)), np.zeros(2), fiber_mask=[True, False, True])
    model = NetworkModel((3,), [Layer(LayerSpec(LayerKind.FC, 'w', 2), params)])
    grads = Gradients({'w': np.ones((2, 3, 1, 1))}, {'w': np.zeros(2)})
    sgd_step(model, grads, None, TrainConfig(weight_decay=0.0))

    assert not model.layer('w').params.values[:, 1].any()
    assert model.layer('w').params.values[:, 0].all()


# ----- train ----- #
def test_zero_epochs_returns_equal_model():
    model = synthetic_model()
    trained, history = train(model, toy_dataset(), TrainConfig(epochs=0))

    assert len(history) == 0
    assert trained is not model
    assert models_equal(trained, model)


def test_train_leaves_input_model_untouched():
    model = synthetic_model()
    before = model.copy()
    train(model, toy_dataset(), TrainConfig(epochs=1, batch_size=8))

    assert models_equal(model, before)


def test_train_is_reproducible():
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=4)
    first, h1 = train(synthetic_model(), toy_dataset(), cfg)
    second, h2 = train(synthetic_model(), toy_dataset(), cfg)

    assert models_equal(first, second)
    assert [m.train_loss for m in h1.epochs] == [m.train_loss for m in h2.epochs]


def test_train_solves_xor():
    model = build_from_layers([2], [dict(kind='fc', name='h', units=16), dict(kind='relu'),
                                     dict(kind='fc', name='out', units=2)], seed=1)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0, batch_size=64, epochs=300)
    trained, history = train(model, xor_dataset(), cfg)

    assert history.final.train_loss < 0.1
    assert history.final.test_error == 0.0


def test_ssl_training_records_sparsity():
    ssl = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 0.01),), couple_filter_channel=False)
    _, history = train(synthetic_model(), toy_dataset(), TrainConfig(epochs=1, batch_size=8), ssl)
    metrics = history.final

    assert set(metrics.sparsity) == {'filter_wise:c1'}
    assert 0.0 <= metrics.group_sparsity <= 1.0
    assert metrics.objective > metrics.train_loss


def test_divergence_is_reported():
    dataset = toy_dataset()
    dataset.train_images = dataset.train_images.copy()
    dataset.train_images[0, 0, 0, 0] = np.nan

    with pytest.raises(TrainingDiverged) as e:
        train(synthetic_model(), dataset, TrainConfig(epochs=1, batch_size=24))
    assert e.value.epoch == 0


def test_empty_training_set_is_rejected():
    empty = SimpleNamespace(train_images=np.zeros((0, 1, 6, 6)), train_labels=np.zeros(0, dtype=np.int64),
                            test_images=np.zeros((0, 1, 6, 6)), test_labels=np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError):
        train(synthetic_model(), empty, TrainConfig(epochs=1))
