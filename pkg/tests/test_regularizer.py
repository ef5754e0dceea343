from copy import deepcopy

import numpy as np
import pytest

from structlearn.sparsity.errors import ConfigError
from structlearn.sparsity.network import Layer, LayerKind, LayerSpec, NetworkModel, WeightTensor4D
from structlearn.sparsity.presets import build_from_layers, lenet, mini_resnet, mlp
from structlearn.sparsity.regularizer import (GroupIndexSet, GroupingScheme, SchemeKind, SslConfig, build_terms,
                                             enumerate_groups, group_lasso_grad, group_lasso_value, group_max_abs,
                                             param_vectors, regularizer_grads, sparsity_stats, ssl_objective)
from .test_data import TEST_DATA
from .test_expected import TEST_EXPECTED


def single_layer(values):
    values = np.asarray(values, dtype=np.float64)
    params = WeightTensor4D(values, np.zeros(values.shape[0]))
    return NetworkModel(values.shape[1:], [Layer(LayerSpec(LayerKind.CONV, 'conv', values.shape[0],
                                                           values.shape[2:]), params)])


def toy_convnet(seed=0):
    data = deepcopy(TEST_DATA['toy_convnet'])
    return build_from_layers(data['input_shape'], data['layers'], seed=seed)


# ----- Groups ----- #
@pytest.mark.parametrize('kind', sorted(TEST_EXPECTED['lenet_groups']))
def test_lenet_conv1_group_counts(kind):
    groups = enumerate_groups(GroupingScheme(kind, layers=('conv1',)), lenet())
    count, size = TEST_EXPECTED['lenet_groups'][kind]

    assert len(groups) == count
    assert {group.size for group in groups} == {size}


def test_filter2d_group_count():
    groups = enumerate_groups(GroupingScheme(SchemeKind.FILTER_2D_WISE), single_layer(np.ones((2, 3, 5, 5))))

    assert len(groups) == 6
    assert {group.size for group in groups} == {25}


@pytest.mark.parametrize('kind', [SchemeKind.FILTER_WISE, SchemeKind.CHANNEL_WISE, SchemeKind.SHAPE_WISE,
                                  SchemeKind.FILTER_2D_WISE])
def test_groups_partition_the_weights(kind):
    model = toy_convnet()
    groups = enumerate_groups(GroupingScheme(kind), model)

    for layer in model.weighted_layers:
        if layer.kind is not LayerKind.CONV:
            continue
        members = np.concatenate([g.member_indices for g in groups if g.layer_id == layer.name])
        assert sorted(members.tolist()) == list(range(layer.params.values.size))


def test_row_column_yields_both_partitions():
    groups = enumerate_groups(GroupingScheme(SchemeKind.ROW_COLUMN), single_layer(np.ones((3, 2, 2, 2))))
    axes = [group.key[0] for group in groups]

    assert axes.count('row') == 3
    assert axes.count('column') == 8


def test_neuron_groups_follow_fc_axes():
    model = mlp()
    inputs = enumerate_groups(GroupingScheme(SchemeKind.NEURON_WISE_IN, layers=('fc1',)), model)
    outputs = enumerate_groups(GroupingScheme(SchemeKind.NEURON_WISE_OUT, layers=('fc1',)), model)

    assert len(inputs) == 784 and inputs[0].size == 500
    assert len(outputs) == 500 and outputs[0].size == 784


def test_neuron_scheme_rejects_conv_layer():
    with pytest.raises(ConfigError):
        enumerate_groups(GroupingScheme(SchemeKind.NEURON_WISE_IN, layers=('conv1',)), lenet())


def test_depth_wise_groups_whole_layers_inside_blocks():
    model = mini_resnet()
    groups = enumerate_groups(GroupingScheme(SchemeKind.DEPTH_WISE), model)

    assert [group.layer_id for group in groups] == ['res1a', 'res1b', 'res2a', 'res2b', 'res3a', 'res3b']
    assert groups[0].size == model.layer('res1a').params.size


def test_depth_wise_requires_shortcuts():
    with pytest.raises(ConfigError):
        enumerate_groups(GroupingScheme(SchemeKind.DEPTH_WISE), lenet())


def test_depth_wise_rejects_unbridged_layer():
    with pytest.raises(ConfigError):
        enumerate_groups(GroupingScheme(SchemeKind.DEPTH_WISE, layers=('conv1',)), mini_resnet())


def test_scheme_matching_no_layer_is_rejected():
    with pytest.raises(ConfigError):
        enumerate_groups(GroupingScheme(SchemeKind.FILTER_WISE), mlp())


def test_unknown_scheme_and_negative_strength():
    with pytest.raises(ConfigError):
        GroupingScheme('block_wise')
    with pytest.raises(ConfigError):
        GroupingScheme(SchemeKind.FILTER_WISE, -1.0)


def test_coupling_adds_partner_scheme():
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 0.5),))

    assert [s.kind for s in cfg.effective_schemes()] == [SchemeKind.FILTER_WISE, SchemeKind.CHANNEL_WISE]
    assert cfg.effective_schemes()[1].strength == 0.5
    assert len(SslConfig(cfg.schemes, couple_filter_channel=False).effective_schemes()) == 1


# ----- Group Lasso ----- #
def test_group_lasso_of_zero_weights():
    model = single_layer(np.zeros((2, 1, 2, 2)))

    assert group_lasso_value(model, enumerate_groups(GroupingScheme(SchemeKind.FILTER_WISE), model)) == 0.0


def test_group_lasso_of_three_four_five():
    group = GroupIndexSet('x', np.array([0, 1]))

    assert group_lasso_value({'x': np.array([3.0, 4.0])}, [group]) == pytest.approx(5.0)


def test_filter_wise_value_matches_brute_force():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((4, 3, 3, 3))
    model = single_layer(values)
    groups = enumerate_groups(GroupingScheme(SchemeKind.FILTER_WISE), model)
    expected = sum(np.sqrt(np.sum(values[n] ** 2)) for n in range(4))

    assert group_lasso_value(model, groups) == pytest.approx(expected, abs=1e-12)


def test_gradient_of_unit_group():
    grad = group_lasso_grad({'x': np.array([3.0, 4.0])}, [GroupIndexSet('x', np.array([0, 1]))], 1e-8)

    np.testing.assert_allclose(grad['x'], [0.6, 0.8])


def test_gradient_of_zero_group_is_zero():
    grad = group_lasso_grad({'x': np.zeros(3)}, [GroupIndexSet('x', np.array([0, 1, 2]))])

    assert not grad['x'].any()


def test_gradient_rejects_non_positive_epsilon():
    with pytest.raises(ConfigError):
        group_lasso_grad({'x': np.ones(2)}, [GroupIndexSet('x', np.array([0, 1]))], 0.0)


@pytest.mark.parametrize('kind', [SchemeKind.FILTER_WISE, SchemeKind.SHAPE_WISE, SchemeKind.ROW_COLUMN])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(1)
    vector = {'conv': rng.standard_normal(3 * 2 * 2 * 2 + 3)}
    groups = enumerate_groups(GroupingScheme(kind), single_layer(np.ones((3, 2, 2, 2))))
    analytic = group_lasso_grad(vector, groups)['conv']

    h = 1e-6
    for i in range(24):
        up, down = dict(conv=vector['conv'].copy()), dict(conv=vector['conv'].copy())
        up['conv'][i] += h
        down['conv'][i] -= h
        numeric = (group_lasso_value(up, groups) - group_lasso_value(down, groups)) / (2 * h)
        assert analytic[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_regularizer_grads_scale_with_strength():
    model = toy_convnet(seed=2)
    weak = regularizer_grads(model, SslConfig((GroupingScheme(SchemeKind.SHAPE_WISE, 0.1),)))
    strong = regularizer_grads(model, SslConfig((GroupingScheme(SchemeKind.SHAPE_WISE, 0.3),)))

    assert set(weak.weights) == {'c1', 'c2', 'c3'}
    np.testing.assert_allclose(strong.weights['c2'], 3 * weak.weights['c2'])
    assert not weak.bias['c2'].any()


def test_depth_wise_gradient_reaches_bias():
    model = mini_resnet(seed=1)
    model.layer('res1a').params.bias = np.ones(16)
    grads = regularizer_grads(model, SslConfig((GroupingScheme(SchemeKind.DEPTH_WISE, 1.0),)))

    assert grads.bias['res1a'].all()


# ----- Objective ----- #
def test_objective_without_regularization_is_data_loss():
    total, breakdown = ssl_objective(toy_convnet(), 1.25, None)

    assert total == 1.25
    assert breakdown['weight_decay'] == 0.0


def test_objective_of_filter_channel_config():
    model = toy_convnet(seed=3)
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 0.2), GroupingScheme(SchemeKind.CHANNEL_WISE, 0.5)))
    total, breakdown = ssl_objective(model, 1.0, cfg)

    expected = 1.0
    for layer in model.weighted_layers:
        if layer.kind is LayerKind.CONV:
            w = layer.params.values
            expected += 0.2 * np.sqrt((w ** 2).sum(axis=(1, 2, 3))).sum()
            expected += 0.5 * np.sqrt((w ** 2).sum(axis=(0, 2, 3))).sum()
    assert total == pytest.approx(expected, abs=1e-10)
    assert set(breakdown) == {'data', 'weight_decay', 'filter_wise', 'channel_wise'}


def test_objective_includes_weight_decay():
    model = single_layer(np.full((1, 1, 2, 2), 2.0))
    total, _ = ssl_objective(model, 0.0, None, weight_decay=0.1)

    assert total == pytest.approx(0.5 * 0.1 * 16)


# ----- Statistics ----- #
def test_fresh_model_has_no_sparsity():
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0),), zero_threshold=0.0)

    assert all(record.n_zero == 0 for record in sparsity_stats(lenet(), cfg))


def test_half_the_filters_zeroed():
    model = lenet()
    model.layer('conv1').params.values[:10] = 0.0
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0, layers=('conv1',)),), couple_filter_channel=False)
    records = sparsity_stats(model, cfg)

    assert len(records) == 1
    assert records[0].fraction == 0.5


def test_stats_match_rescan_of_raw_weights():
    model = toy_convnet(seed=4)
    w = model.layer('c2').params.values
    w[:, [0, 3]] = 0.0
    w[2] = 1e-5
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0), GroupingScheme(SchemeKind.SHAPE_WISE, 1.0)),
                    zero_threshold=1e-4)
    records = {(r.scheme, r.layer): r for r in sparsity_stats(model, cfg)}

    flat = np.abs(w.reshape(w.shape[0], -1))
    assert records[('filter_wise', 'c2')].n_zero == int((flat.max(axis=1) < 1e-4).sum())
    assert records[('channel_wise', 'c2')].n_zero == 2
    assert records[('shape_wise', 'c2')].n_zero == int((flat.max(axis=0) < 1e-4).sum())


def test_threshold_tie_is_kept():
    model = single_layer(np.full((2, 1, 1, 1), 1e-4))
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0),), zero_threshold=1e-4)

    assert sparsity_stats(model, cfg)[0].n_zero == 0


def test_build_terms_splits_row_column():
    cfg = SslConfig((GroupingScheme(SchemeKind.ROW_COLUMN, 0.1, column_strength=0.3),))
    terms = build_terms(toy_convnet(), cfg)

    assert [(t.label, t.strength) for t in terms] == [('row_column/rows', 0.1), ('row_column/columns', 0.3)]


# ----- Invariants ----- #
SINGLE_PARTITION_SCHEMES = [SchemeKind.FILTER_WISE, SchemeKind.CHANNEL_WISE, SchemeKind.SHAPE_WISE,
                            SchemeKind.FILTER_2D_WISE, SchemeKind.DEPTH_WISE, SchemeKind.NEURON_WISE_IN,
                            SchemeKind.NEURON_WISE_OUT]


def randomized_model_for(kind, seed=0):
    """A model the scheme applies to, with standard normal weights and biases."""
    if kind is SchemeKind.DEPTH_WISE:
        model = mini_resnet(seed=seed)
    elif kind in (SchemeKind.NEURON_WISE_IN, SchemeKind.NEURON_WISE_OUT):
        data = deepcopy(TEST_DATA['tiny_mlp'])
        model = build_from_layers(data['input_shape'], data['layers'], seed=seed)
    else:
        model = toy_convnet(seed)
    rng = np.random.default_rng(seed)
    for layer in model.weighted_layers:
        layer.params.values = rng.standard_normal(layer.params.values.shape)
        layer.params.bias = rng.standard_normal(layer.params.bias.shape)
    return model


def literal_group_lasso(kind, model, layer_ids):
    """Sum of group l2 norms written out per grouping kind on the raw (N, C, M, K) tensors."""
    total = 0.0
    for layer_id in layer_ids:
        w, b = model.layer(layer_id).params.values, model.layer(layer_id).params.bias
        if kind in (SchemeKind.FILTER_WISE, SchemeKind.NEURON_WISE_OUT):
            total += np.sqrt((w ** 2).sum(axis=(1, 2, 3))).sum()
        elif kind in (SchemeKind.CHANNEL_WISE, SchemeKind.NEURON_WISE_IN):
            total += np.sqrt((w ** 2).sum(axis=(0, 2, 3))).sum()
        elif kind is SchemeKind.SHAPE_WISE:
            total += np.sqrt((w ** 2).sum(axis=0)).sum()
        elif kind is SchemeKind.FILTER_2D_WISE:
            total += np.sqrt((w ** 2).sum(axis=(2, 3))).sum()
        elif kind is SchemeKind.ROW_COLUMN:
            total += np.sqrt((w ** 2).sum(axis=(1, 2, 3))).sum() + np.sqrt((w ** 2).sum(axis=0)).sum()
        elif kind is SchemeKind.DEPTH_WISE:
            total += np.sqrt((w ** 2).sum() + (b ** 2).sum())
    return total


@pytest.mark.parametrize('seed', range(3))
@pytest.mark.parametrize('kind', SINGLE_PARTITION_SCHEMES + [SchemeKind.ROW_COLUMN])
def test_value_matches_literal_sum(kind, seed):
    model = randomized_model_for(kind, seed)
    groups = enumerate_groups(GroupingScheme(kind), model)
    layer_ids = sorted({group.layer_id for group in groups})

    assert group_lasso_value(model, groups) == pytest.approx(literal_group_lasso(kind, model, layer_ids),
                                                             rel=1e-12, abs=1e-10)


@pytest.mark.parametrize('alpha', [-2.5, 0.3, 3.0])
@pytest.mark.parametrize('kind', SINGLE_PARTITION_SCHEMES + [SchemeKind.ROW_COLUMN])
def test_value_is_positively_homogeneous(kind, alpha):
    model = randomized_model_for(kind, seed=5)
    groups = enumerate_groups(GroupingScheme(kind), model)
    scaled = {layer_id: alpha * vector for layer_id, vector in param_vectors(model).items()}

    assert group_lasso_value(scaled, groups) == pytest.approx(abs(alpha) * group_lasso_value(model, groups),
                                                              rel=1e-12)


def test_stabilized_gradient_approaches_exact_gradient():
    vector = {'x': np.array([3e-3, 4e-3, 3e-5, 4e-5, 0.3, 0.4])}
    groups = [GroupIndexSet('x', np.array([0, 1])), GroupIndexSet('x', np.array([2, 3])),
              GroupIndexSet('x', np.array([4, 5]))]
    h = 1e-9
    numeric = np.zeros(6)
    for i in range(6):
        up, down = dict(x=vector['x'].copy()), dict(x=vector['x'].copy())
        up['x'][i] += h
        down['x'][i] -= h
        numeric[i] = (group_lasso_value(up, groups) - group_lasso_value(down, groups)) / (2 * h)

    errors = [np.abs(group_lasso_grad(vector, groups, epsilon)['x'] - numeric).max()
              for epsilon in (1e-2, 1e-4, 1e-6)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-6


@pytest.mark.parametrize('kind', SINGLE_PARTITION_SCHEMES)
def test_lasso_step_shrinks_every_group(kind):
    model = randomized_model_for(kind, seed=7)
    groups = enumerate_groups(GroupingScheme(kind), model)
    lr, strength = 0.01, 0.1
    before = param_vectors(model)
    grads = group_lasso_grad(before, groups)
    after = {layer_id: vector - lr * strength * grads.get(layer_id, 0.0) for layer_id, vector in before.items()}

    for group in groups:
        old = np.linalg.norm(before[group.layer_id][group.member_indices])
        new = np.linalg.norm(after[group.layer_id][group.member_indices])
        assert lr * strength < old
        assert new < old
        assert new == pytest.approx(old - lr * strength, rel=1e-9)


def test_gap_groups_are_counted_separately():
    model = single_layer(np.ones((4, 1, 1, 1)))
    model.layer('conv').params.values[0] = 0.0
    model.layer('conv').params.values[1] = 5e-3
    model.layer('conv').params.values[2] = 5e-2
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0),), zero_threshold=1e-4,
                    couple_filter_channel=False)
    record = sparsity_stats(model, cfg)[0]

    assert (record.n_zero, record.n_gap) == (1, 1)


def test_group_max_abs_per_layer():
    model = toy_convnet(seed=6)
    model.layer('c1').params.values[2] = 0.0
    cfg = SslConfig((GroupingScheme(SchemeKind.FILTER_WISE, 1.0),), couple_filter_channel=False)
    blocks = group_max_abs(model, cfg)

    assert [(label, layer_id) for label, layer_id, _ in blocks] == [('filter_wise', 'c1'), ('filter_wise', 'c2'),
                                                                  ('filter_wise', 'c3')]
    c1 = blocks[0][2]
    np.testing.assert_array_equal(c1, np.abs(model.layer('c1').params.values).max(axis=(1, 2, 3)))
    assert c1[2] == 0.0
