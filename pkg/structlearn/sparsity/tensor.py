"""Numerical substrate: dense GEMM, im2col lowering and CSR sparse matrices.

Dense tensors and matrices are plain row-major ``numpy.ndarray`` objects
(float64 unless a caller asks for float32 explicitly). The CSR type keeps its
three arrays explicit and hands the multiply to ``scipy.sparse``.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
DenseMatrix = np.ndarray
Pair = Tuple[int, int]


def as_pair(value: Union[int, Sequence[int]]) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def _as_matrix(m, name: str = 'matrix') -> DenseMatrix:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"`{name}` must be 2-D, got shape {m.shape}")
    return m


def _row_slices(rows: int, threads: int) -> List[slice]:
    """Split ``rows`` into at most ``threads`` contiguous, non-empty chunks."""
    threads = max(1, min(int(threads), rows))
    bounds = np.linspace(0, rows, threads + 1).astype(int)
    return [slice(start, stop) for start, stop in zip(bounds[:-1], bounds[1:]) if stop > start]


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed Sparse Row matrix.

    ``row_ptr[r]:row_ptr[r + 1]`` addresses the entries of row ``r`` in
    ``col_idx`` and ``values``; column indices are strictly increasing per row.
    """
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _blocks: Dict[int, list] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ShapeError(f"Invalid CSR extents {self.rows}x{self.cols}")
        if len(self.row_ptr) != self.rows + 1:
            raise ShapeError(f"`row_ptr` must have {self.rows + 1} entries, got {len(self.row_ptr)}")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise ShapeError("`row_ptr` must start at 0 and be non-decreasing")
        nnz = int(self.row_ptr[-1])
        if len(self.col_idx) != nnz or len(self.values) != nnz:
            raise ShapeError(
                f"`row_ptr` announces {nnz} nonzeros but col_idx/values hold "
                f"{len(self.col_idx)}/{len(self.values)}"
            )
        if nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= self.cols):
            raise ShapeError("Column index out of range")
        for r in range(self.rows):
            row_cols = self.col_idx[self.row_ptr[r]:self.row_ptr[r + 1]]
            if np.any(np.diff(row_cols) <= 0):
                raise ShapeError(f"Column indices of row {r} are not strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> Pair:
        return self.rows, self.cols

    @property
    def sparsity(self) -> float:
        total = self.rows * self.cols
        return 1.0 - self.nnz / total if total else 0.0

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        """The same matrix as a ``scipy.sparse.csr_matrix`` sharing our arrays."""
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    def row_blocks(self, threads: int) -> list:
        """Row-sliced scipy matrices for ``threads`` workers, built once per count."""
        if threads not in self._blocks:
            self._blocks[threads] = [(s, self.scipy[s]) for s in _row_slices(self.rows, threads)]
        return self._blocks[threads]


def output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial extent of a sliding window output; the window must tile exactly."""
    span = size + 2 * pad - kernel
    if stride < 1 or span < 0 or span % stride:
        raise ShapeError(
            f"Window of {kernel} with stride {stride} and pad {pad} does not tile an extent of {size}"
        )
    return span // stride + 1


def gemm(a: DenseMatrix, b: DenseMatrix, threads: int = 1) -> DenseMatrix:
    """Dense matrix product ``a @ b``.

    Args:
        a: Left operand, shape (m, k).
        b: Right operand, shape (k, n).
        threads: When greater than 1, output rows are computed by a thread pool.

    Returns:
        The (m, n) product.
    """
    a = _as_matrix(a, 'a')
    b = _as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")

    if threads <= 1 or a.shape[0] < 2:
        return a @ b

    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))

    def work(rows: slice):
        np.matmul(a[rows], b, out=out[rows])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, _row_slices(a.shape[0], threads)))
    return out


def csr_from_dense(m: DenseMatrix, zero_tol: float = 0.0) -> CsrMatrix:
    """Build a CSR matrix from the entries of ``m`` with ``|value| > zero_tol``."""
    if zero_tol < 0:
        raise ValueError("`zero_tol` must be non-negative")
    m = _as_matrix(m, 'm')
    keep = np.abs(m) > zero_tol
    row_of, col_of = np.nonzero(keep)
    row_ptr = np.zeros(m.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_of, minlength=m.shape[0]), out=row_ptr[1:])
    return CsrMatrix(
        rows=m.shape[0],
        cols=m.shape[1],
        row_ptr=row_ptr,
        col_idx=col_of.astype(np.int64),
        values=np.ascontiguousarray(m[keep]),
    )


def csr_to_dense(a: CsrMatrix) -> DenseMatrix:
    out = np.zeros(a.shape, dtype=a.values.dtype if a.nnz else np.float64)
    row_of = np.repeat(np.arange(a.rows), np.diff(a.row_ptr))
    out[row_of, a.col_idx] = a.values
    return out


def csr_dense_matmul(a: CsrMatrix, b: DenseMatrix, threads: int = 1) -> DenseMatrix:
    """Sparse-dense product ``a @ b`` with ``a`` in CSR form."""
    b = _as_matrix(b, 'b')
    if a.cols != b.shape[0]:
        raise ShapeError(f"Cannot multiply CSR {a.shape} by {b.shape}")

    if threads <= 1 or a.rows < 2:
        return np.asarray(a.scipy @ b)

    out = np.empty((a.rows, b.shape[1]), dtype=np.result_type(a.values, b))

    def work(block):
        rows, matrix = block
        out[rows] = matrix @ b

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, a.row_blocks(threads)))
    return out


def im2col_batch(x: Tensor, kernel, stride=(1, 1), pad=(0, 0), pad_value: float = 0.0) -> np.ndarray:
    """Lower a (B, C, H, W) batch to (B, C*M*K, H_out*W_out) patch matrices.

    Rows are ordered channel-major, then kernel row, then kernel column; column
    ``q`` is output position ``(q // W_out, q % W_out)``. Padded cells hold
    ``pad_value`` (zero for convolution, ``-inf`` for max pooling).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"Expected a (B, C, H, W) batch, got shape {x.shape}")
    (m, k), (s_h, s_w), (p_h, p_w) = as_pair(kernel), as_pair(stride), as_pair(pad)
    batch, channels, height, width = x.shape
    h_out = output_extent(height, m, s_h, p_h)
    w_out = output_extent(width, k, s_w, p_w)

    if p_h or p_w:
        x = np.pad(x, ((0, 0), (0, 0), (p_h, p_h), (p_w, p_w)), constant_values=pad_value)
    else:
        x = np.ascontiguousarray(x)

    s_b, s_c, s_y, s_x = x.strides
    patches = as_strided(
        x,
        shape=(batch, channels, m, k, h_out, w_out),
        strides=(s_b, s_c, s_y, s_x, s_h * s_y, s_w * s_x),
        writeable=False,
    )
    return patches.reshape(batch, channels * m * k, h_out * w_out)


def im2col(x: Tensor, kernel, stride=(1, 1), pad=(0, 0)) -> DenseMatrix:
    """Lower one (C, H, W) feature map to a (C*M*K, H_out*W_out) matrix."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"Expected a (C, H, W) tensor, got shape {x.shape}")
    return im2col_batch(x[np.newaxis], kernel, stride, pad)[0]


def col2im(cols: np.ndarray, input_shape, kernel, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Adjoint of ``im2col_batch``: scatter-add patch columns back onto the input grid."""
    (m, k), (s_h, s_w), (p_h, p_w) = as_pair(kernel), as_pair(stride), as_pair(pad)
    batch, channels, height, width = input_shape
    h_out = output_extent(height, m, s_h, p_h)
    w_out = output_extent(width, k, s_w, p_w)

    grid = np.zeros((batch, channels, height + 2 * p_h, width + 2 * p_w), dtype=cols.dtype)
    patches = cols.reshape(batch, channels, m, k, h_out, w_out)
    for i in range(m):
        for j in range(k):
            grid[:, :, i:i + s_h * h_out:s_h, j:j + s_w * w_out:s_w] += patches[:, :, i, j]
    return grid[:, :, p_h:p_h + height, p_w:p_w + width]


def lower_weights(w) -> DenseMatrix:
    """Reshape an (N, C, M, K) weight tensor into the (N, C*M*K) GEMM weight matrix.

    Row ``n`` is filter ``n``; column ``(c, m, k)`` is the shape fiber
    ``W[:, c, m, k]`` and lines up with the rows produced by ``im2col``.
    """
    values = np.asarray(getattr(w, 'values', w))
    if values.ndim != 4:
        raise ShapeError(f"Expected an (N, C, M, K) weight tensor, got shape {values.shape}")
    return values.reshape(values.shape[0], -1)
