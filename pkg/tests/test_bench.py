from unittest.mock import patch

import numpy as np
import pytest

from structlearn.sparsity.bench import (BenchCase, BenchRecord, Kernel, Pattern, alexnet_shape_suite,
                                        make_structured_case, make_unstructured_case, model_layer_suite, run_bench,
                                        speedup_table, thread_scaling)
from structlearn.sparsity.compactor import detect_zero_groups
from structlearn.sparsity.errors import ChecksumMismatch, ConfigError
from structlearn.sparsity.presets import lenet
from .test_expected import TEST_EXPECTED

SMALL_CASES = [
    BenchCase('a', 12, 20, 9, row_sparsity=0.25, col_sparsity=0.5, seed=1),
    BenchCase('a', 12, 20, 9, pattern=Pattern.UNSTRUCTURED, unstructured_sparsity=0.8, seed=1),
]


# ----- Cases ----- #
def test_structured_case_has_exact_zero_rows_and_columns():
    weight, features = make_structured_case(10, 8, 3, 0.5, 0.25, seed=0)

    assert features.shape == (8, 3)
    assert int((~weight.any(axis=1)).sum()) == 5
    assert int((~weight.any(axis=0)).sum()) == 2


def test_structured_case_is_seeded():
    first = make_structured_case(6, 6, 2, 0.5, 0.5, seed=3)
    second = make_structured_case(6, 6, 2, 0.5, 0.5, seed=3)

    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])


def test_unstructured_extremes():
    dense, _ = make_unstructured_case(5, 5, 1, 0.0)
    empty, _ = make_unstructured_case(5, 5, 1, 1.0)

    assert dense.all()
    assert not empty.any()


def test_unstructured_sparsity_is_validated():
    with pytest.raises(ConfigError):
        make_unstructured_case(2, 2, 2, 1.5)


def test_bench_case_validation():
    with pytest.raises(ConfigError):
        BenchCase('x', 0, 1, 1)
    with pytest.raises(ConfigError):
        BenchCase('x', 1, 1, 1, col_sparsity=-0.1)


def test_bench_case_generates_requested_dtype():
    weight, features = BenchCase('x', 3, 4, 5).generate(np.float32)

    assert weight.dtype == np.float32 and features.dtype == np.float32
    assert weight.shape == (3, 4) and features.shape == (4, 5)


@pytest.mark.parametrize('layer', sorted(TEST_EXPECTED['alexnet']))
def test_alexnet_suite_shapes(layer):
    expected = TEST_EXPECTED['alexnet'][layer]
    cases = {case.name: case for case in alexnet_shape_suite()}
    structured, unstructured = cases[f"{layer}/structured"], cases[f"{layer}/unstructured"]

    assert (structured.m, structured.k, structured.n) == (expected['m'], expected['k'], expected['n'])
    assert structured.row_sparsity == expected['row_sparsity']
    assert structured.col_sparsity == expected['col_sparsity']
    assert unstructured.unstructured_sparsity == expected['unstructured_sparsity']
    assert (unstructured.m, unstructured.k, unstructured.n) == (structured.m, structured.k, structured.n)


def test_model_layer_suite_follows_plan():
    model = lenet()
    model.layer('conv1').params.values[5:] = 0.0
    cases = {case.layer_name: case for case in model_layer_suite(model, detect_zero_groups(model, 1e-4))}

    assert sorted(cases) == ['conv1', 'conv2']
    assert (cases['conv1'].m, cases['conv1'].k, cases['conv1'].n) == (20, 25, 576)
    assert cases['conv1'].row_sparsity == pytest.approx(0.75)
    assert cases['conv1'].col_sparsity == 0.0
    assert (cases['conv2'].m, cases['conv2'].k, cases['conv2'].n) == (50, 500, 64)
    assert cases['conv2'].row_sparsity == 0.0
    assert cases['conv2'].col_sparsity == pytest.approx(0.75)


# ----- Timing ----- #
def test_every_kernel_agrees_with_dense():
    records = run_bench(SMALL_CASES, repeats=3, warmup=0)

    assert len(records) == len(SMALL_CASES) * len(Kernel)
    for case in SMALL_CASES:
        checksums = [r.checksum for r in records if r.case is case]
        assert checksums == pytest.approx([checksums[0]] * len(checksums), rel=1e-9)


def test_dense_record_has_unit_speedup():
    records = run_bench(SMALL_CASES[:1], kernels=[Kernel.DENSE, Kernel.CSR_SPARSE], repeats=3, warmup=1)
    dense = [r for r in records if r.kernel is Kernel.DENSE]

    assert len(records) == 2
    assert dense[0].speedup_vs_dense == 1.0
    assert all(r.wall_time >= 0 for r in records)


def test_float32_bench_passes_checksum():
    records = run_bench(SMALL_CASES, repeats=3, warmup=0, dtype=np.float32)

    assert {r.dtype for r in records} == {'float32'}


def test_threaded_bench_passes_checksum():
    records = run_bench(SMALL_CASES[:1], repeats=3, warmup=0, threads=2)

    assert {r.threads for r in records} == {2}


def test_too_few_repeats():
    with pytest.raises(ConfigError):
        run_bench(SMALL_CASES, repeats=2)


def test_negative_warmup():
    with pytest.raises(ConfigError):
        run_bench(SMALL_CASES, warmup=-1)


@patch('structlearn.sparsity.bench.csr_dense_matmul')
def test_wrong_product_is_reported(mock_matmul):
    mock_matmul.side_effect = lambda a, b, threads=1: np.zeros((a.shape[0], b.shape[1]))

    with pytest.raises(ChecksumMismatch) as e:
        run_bench(SMALL_CASES[:1], kernels=[Kernel.CSR_SPARSE], repeats=3, warmup=0)
    assert e.value.kernel == 'csr_sparse'
    assert e.value.found == 0.0


def test_thread_scaling_covers_each_count():
    records = thread_scaling(SMALL_CASES[:1], [1, 2], kernels=[Kernel.DENSE], repeats=3, warmup=0)

    assert [r.threads for r in records] == [1, 2]


def test_speedup_table_groups_kernels():
    case = SMALL_CASES[0]
    records = [BenchRecord(case, Kernel.DENSE, 2.0, 1.0, 5.0),
               BenchRecord(case, Kernel.COMPACTED_DENSE, 0.5, 4.0, 5.0),
               BenchRecord(case, Kernel.DENSE, 1.0, 1.0, 5.0, threads=2)]
    rows = speedup_table(records)

    assert rows == [
        {'layer': 'a', 'pattern': 'structured', 'threads': 1, 'dense': 1.0, 'compacted_dense': 4.0},
        {'layer': 'a', 'pattern': 'structured', 'threads': 2, 'dense': 1.0},
    ]
