"""Timing harness: dense GEMM vs row/column-compacted GEMM vs CSR sparse-dense products."""
import logging
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np

from .compactor import CompactPlan
from .errors import ChecksumMismatch, ConfigError
from .network import LayerKind, NetworkModel
from .tensor import DenseMatrix, csr_dense_matmul, csr_from_dense, gemm, output_extent

logger = logging.getLogger(__name__)

CHECKSUM_RTOL = 1e-6

# name, filters, input channels per filter, kernel, stride, pad, input extent
ALEXNET_CONV = (
    ('conv1', 96, 3, 11, 4, 0, 227),
    ('conv2', 256, 48, 5, 1, 2, 27),
    ('conv3', 384, 256, 3, 1, 1, 13),
    ('conv4', 384, 192, 3, 1, 1, 13),
    ('conv5', 256, 192, 3, 1, 1, 13),
)
ALEXNET_COLUMN_SPARSITY = (0.0, 0.632, 0.769, 0.847, 0.807)
ALEXNET_ROW_SPARSITY = (0.094, 0.129, 0.406, 0.469, 0.0)
ALEXNET_UNSTRUCTURED_SPARSITY = (0.676, 0.924, 0.972, 0.966, 0.943)


class Pattern(Enum):
    STRUCTURED = 'structured'
    UNSTRUCTURED = 'unstructured'


class Kernel(Enum):
    DENSE = 'dense'
    COMPACTED_DENSE = 'compacted_dense'
    CSR_SPARSE = 'csr_sparse'


@dataclass(frozen=True)
class BenchCase:
    """A weight matrix (m x k) times lowered features (k x n) at a given sparsity."""
    layer_name: str
    m: int
    k: int
    n: int
    row_sparsity: float = 0.0
    col_sparsity: float = 0.0
    pattern: Pattern = Pattern.STRUCTURED
    unstructured_sparsity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'pattern', Pattern(self.pattern))
        if min(self.m, self.k, self.n) < 1:
            raise ConfigError(f"GEMM dimensions of {self.layer_name!r} must be positive")
        for label in ('row_sparsity', 'col_sparsity', 'unstructured_sparsity'):
            if not 0.0 <= getattr(self, label) <= 1.0:
                raise ConfigError(f"`{label}` of {self.layer_name!r} must be in [0, 1]")

    @property
    def name(self) -> str:
        return f"{self.layer_name}/{self.pattern.value}"

    def generate(self, dtype=np.float64) -> Tuple[DenseMatrix, DenseMatrix]:
        if self.pattern is Pattern.STRUCTURED:
            weight, features = make_structured_case(self.m, self.k, self.n, self.row_sparsity,
                                                    self.col_sparsity, self.seed)
        else:
            weight, features = make_unstructured_case(self.m, self.k, self.n,
                                                      self.unstructured_sparsity, self.seed)
        return weight.astype(dtype), features.astype(dtype)


@dataclass(frozen=True)
class BenchRecord:
    case: BenchCase
    kernel: Kernel
    wall_time: float
    speedup_vs_dense: float
    checksum: float
    threads: int = 1
    dtype: str = 'float64'


def make_structured_case(m: int, k: int, n: int, row_s: float, col_s: float,
                         seed: int = 0) -> Tuple[DenseMatrix, DenseMatrix]:
    """Standard-normal weight with exactly round(row_s*m) zero rows and round(col_s*k) zero columns."""
    rng = np.random.default_rng(seed)
    weight = rng.standard_normal((m, k))
    weight[rng.choice(m, int(round(row_s * m)), replace=False)] = 0.0
    weight[:, rng.choice(k, int(round(col_s * k)), replace=False)] = 0.0
    return weight, rng.standard_normal((k, n))


def make_unstructured_case(m: int, k: int, n: int, sparsity: float,
                           seed: int = 0) -> Tuple[DenseMatrix, DenseMatrix]:
    """Standard-normal weight with each entry zeroed independently with probability ``sparsity``."""
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError("`sparsity` must be in [0, 1]")
    rng = np.random.default_rng(seed)
    weight = rng.standard_normal((m, k))
    weight[rng.random((m, k)) < sparsity] = 0.0
    return weight, rng.standard_normal((k, n))


def _median_time(fn: Callable[[], DenseMatrix], repeats: int, warmup: int) -> Tuple[float, DenseMatrix]:
    for _ in range(warmup):
        fn()
    times = []
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), out


def _kernel_fn(kernel: Kernel, weight: DenseMatrix, features: DenseMatrix, threads: int) -> Callable[[], DenseMatrix]:
    """Closure timing only the recurring work; weight compaction and CSR conversion happen here, once."""
    if kernel is Kernel.DENSE:
        return lambda: gemm(weight, features, threads)

    if kernel is Kernel.COMPACTED_DENSE:
        nonzero = weight != 0
        rows = np.flatnonzero(nonzero.any(axis=1))
        cols = np.flatnonzero(nonzero.any(axis=0))
        compact = np.ascontiguousarray(weight[rows][:, cols])
        return lambda: gemm(compact, features[cols], threads)

    csr = csr_from_dense(weight)
    return lambda: csr_dense_matmul(csr, features, threads)


def _checksum_tolerance(dtype) -> float:
    return max(CHECKSUM_RTOL, 100 * float(np.finfo(dtype).eps))


def run_bench(cases: Iterable[BenchCase], kernels: Sequence[Kernel] = tuple(Kernel), repeats: int = 11,
              warmup: int = 3, threads: int = 1, dtype=np.float64) -> List[BenchRecord]:
    """Time every kernel on every case.

    The dense product is always run: it provides both the speedup baseline
    and the reference checksum (Frobenius norm of the product) that every
    other kernel must match.

    Raises:
        ConfigError: fewer than 3 repeats.
        ChecksumMismatch: a kernel computed a different product.
    """
    if repeats < 3:
        raise ConfigError("At least 3 timed repeats are required")
    if warmup < 0 or threads < 1:
        raise ConfigError("`warmup` must be non-negative and `threads` positive")

    dtype = np.dtype(dtype)
    tolerance = _checksum_tolerance(dtype)
    kernels = [Kernel(kernel) for kernel in kernels]
    records = []
    for case in cases:
        weight, features = case.generate(dtype)
        dense_time, dense_out = _median_time(_kernel_fn(Kernel.DENSE, weight, features, threads), repeats, warmup)
        expected = float(np.linalg.norm(dense_out.astype(np.float64)))

        for kernel in kernels:
            if kernel is Kernel.DENSE:
                wall_time, checksum = dense_time, expected
            else:
                wall_time, out = _median_time(_kernel_fn(kernel, weight, features, threads), repeats, warmup)
                checksum = float(np.linalg.norm(out.astype(np.float64)))
                if abs(checksum - expected) > tolerance * max(abs(expected), np.finfo(np.float64).tiny):
                    raise ChecksumMismatch(case.name, kernel.value, expected, checksum)

            record = BenchRecord(case, kernel, wall_time, dense_time / wall_time if wall_time else float('inf'),
                                 checksum, threads, dtype.name)
            records.append(record)
            logger.info({
                "message": "Benchmark record.",
                "case": case.name,
                "shape": [case.m, case.k, case.n],
                "kernel": kernel.value,
                "wall_time_s": wall_time,
                "speedup": round(record.speedup_vs_dense, 3),
                "threads": threads,
            })
    return records


def alexnet_shape_suite(seed: int = 0) -> List[BenchCase]:
    """Conv1-conv5 GEMM shapes of AlexNet, each with its structured and its unstructured sparsity.

    Shapes come from the layer geometry: m = filters, k = channels * kernel^2,
    n = output extent squared.
    """
    cases = []
    for index, (name, filters, channels, kernel, stride, pad, size) in enumerate(ALEXNET_CONV):
        k = channels * kernel * kernel
        n = output_extent(size, kernel, stride, pad) ** 2
        cases.append(BenchCase(name, filters, k, n,
                               row_sparsity=ALEXNET_ROW_SPARSITY[index],
                               col_sparsity=ALEXNET_COLUMN_SPARSITY[index],
                               pattern=Pattern.STRUCTURED, seed=seed))
        cases.append(BenchCase(name, filters, k, n,
                               pattern=Pattern.UNSTRUCTURED,
                               unstructured_sparsity=ALEXNET_UNSTRUCTURED_SPARSITY[index], seed=seed))
    return cases


def model_layer_suite(model: NetworkModel, plan: CompactPlan, seed: int = 0) -> List[BenchCase]:
    """Structured cases with the GEMM shape and planned row/column sparsity of each conv layer.

    Rows survive when the filter is kept and not dead; columns survive when
    their channel is kept and the fiber is unmasked.
    """
    cases = []
    for layer, (_, out_shape) in zip(model.layers, model.layer_shapes()):
        if layer.kind is not LayerKind.CONV or not plan.layers[layer.name].keep_layer:
            continue
        lp, params = plan.layers[layer.name], layer.params
        rows_alive = len(np.setdiff1d(lp.keep_filters, lp.dead_filters))
        per_channel = lp.fiber_mask.reshape(params.n_channels, -1)
        cols_alive = int(per_channel[lp.keep_channels].sum())
        cases.append(BenchCase(
            layer.name,
            m=params.n_filters,
            k=params.fiber_count,
            n=int(np.prod(out_shape[1:])),
            row_sparsity=1.0 - rows_alive / params.n_filters,
            col_sparsity=1.0 - cols_alive / params.fiber_count,
            seed=seed,
        ))
    return cases


def thread_scaling(cases: Sequence[BenchCase], thread_counts: Iterable[int],
                   kernels: Sequence[Kernel] = tuple(Kernel), repeats: int = 11, warmup: int = 3,
                   dtype=np.float64) -> List[BenchRecord]:
    """Rerun ``cases`` at each thread count, with the same count for every kernel."""
    records = []
    for threads in thread_counts:
        records.extend(run_bench(cases, kernels, repeats, warmup, threads, dtype))
    return records


def speedup_table(records: Iterable[BenchRecord]) -> List[dict]:
    """One row per (case, threads) with the speedup of each kernel, for plotting."""
    rows = {}
    for record in records:
        key = (record.case.layer_name, record.case.pattern.value, record.threads)
        row = rows.setdefault(key, {'layer': key[0], 'pattern': key[1], 'threads': key[2]})
        row[record.kernel.value] = record.speedup_vs_dense
    return list(rows.values())
