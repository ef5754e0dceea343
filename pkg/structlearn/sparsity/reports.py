"""CSV report writers and the optional speedup bar chart."""
import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .bench import BenchRecord
from .compactor import FlopReport, structure_summary
from .errors import ConfigError
from .network import LayerKind, NetworkModel
from .training import History

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ('epoch', 'phase', 'learning_rate', 'train_loss', 'test_loss', 'test_error',
                   'objective', 'group_sparsity', 'sparsity_detail')
SWEEP_COLUMNS = ('scheme', 'strength', 'status', 'test_error', 'group_sparsity', 'flop_ratio',
                 'sparsity_detail', 'output_dir', 'message')
BENCH_COLUMNS = ('layer_name', 'pattern', 'm', 'k', 'n', 'row_sparsity', 'col_sparsity',
                 'unstructured_sparsity', 'kernel', 'threads', 'dtype', 'wall_time_s', 'speedup', 'checksum')
PLOT_COLUMNS = ('layer', 'pattern', 'threads', 'dense', 'compacted_dense', 'csr_sparse')
PCA_COLUMNS = ('source', 'layer', 'dim', 'error')
STATS_COLUMNS = ('scheme', 'layer', 'groups', 'zero_groups', 'gap_groups', 'sparsity')
MAX_ABS_COLUMNS = ('scheme', 'layer', 'group', 'max_abs')
STRUCTURE_COLUMNS = ('layer', 'kind', 'filters', 'channels', 'fibers', 'fibers_per_channel',
                     'row_sparsity', 'column_sparsity')
FLOP_COLUMNS = ('layer', 'flops_before', 'flops_after', 'flops_after_2d', 'ratio', 'ratio_2d')
TABLE_COLUMNS = ('model', 'error', 'filters', 'channels', 'filter_size', 'fibers', 'flop', 'speedup')


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({column: row.get(column, '') for column in columns})
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def format_detail(detail: Mapping[str, float]) -> str:
    """``key=value`` pairs joined by ``;`` in key order, e.g. ``filter_wise:conv1=0.75``."""
    return ';'.join(f"{key}={value:.6g}" for key, value in sorted(detail.items()))


def metrics_rows(history: History, phase: str) -> List[dict]:
    return [
        {
            'epoch': m.epoch,
            'phase': phase,
            'learning_rate': m.learning_rate,
            'train_loss': m.train_loss,
            'test_loss': m.test_loss,
            'test_error': m.test_error,
            'objective': m.objective,
            'group_sparsity': m.group_sparsity,
            'sparsity_detail': format_detail(m.sparsity),
        }
        for m in history.epochs
    ]


def bench_rows(records: Iterable[BenchRecord]) -> List[dict]:
    return [
        {
            'layer_name': r.case.layer_name,
            'pattern': r.case.pattern.value,
            'm': r.case.m,
            'k': r.case.k,
            'n': r.case.n,
            'row_sparsity': r.case.row_sparsity,
            'col_sparsity': r.case.col_sparsity,
            'unstructured_sparsity': r.case.unstructured_sparsity,
            'kernel': r.kernel.value,
            'threads': r.threads,
            'dtype': r.dtype,
            'wall_time_s': r.wall_time,
            'speedup': r.speedup_vs_dense,
            'checksum': r.checksum,
        }
        for r in records
    ]


def flop_rows(report: FlopReport) -> List[dict]:
    return [
        {
            'layer': layer.name,
            'flops_before': layer.before,
            'flops_after': layer.after,
            'flops_after_2d': layer.after_2d,
            'ratio': layer.ratio,
            'ratio_2d': layer.ratio_2d,
        }
        for layer in report.layers
    ]


def structure_rows(model: NetworkModel, zero_threshold: float = 0.0) -> List[dict]:
    return [
        {
            'layer': s.name,
            'kind': s.kind.value,
            'filters': s.filters,
            'channels': s.channels,
            'fibers': s.fibers,
            'fibers_per_channel': s.fibers_per_channel,
            'row_sparsity': s.row_sparsity,
            'column_sparsity': s.column_sparsity,
        }
        for s in structure_summary(model, zero_threshold)
    ]


def max_abs_rows(blocks: Iterable[Tuple[str, str, np.ndarray]]) -> List[dict]:
    """One row per group with its max-abs weight, for histograms of the dead/alive split."""
    return [
        {'scheme': label, 'layer': layer_id, 'group': i, 'max_abs': float(value)}
        for label, layer_id, values in blocks
        for i, value in enumerate(values)
    ]


def table_row(label: str, error: float, model: NetworkModel, flops: Optional[FlopReport] = None,
              speedups: Optional[Mapping[str, float]] = None, zero_threshold: float = 0.0) -> dict:
    """Error, filter and channel counts, filter sizes and FLOP ratios per conv layer, dash-joined."""
    layers = [s for s in structure_summary(model, zero_threshold) if s.kind is LayerKind.CONV]
    if not layers:
        layers = structure_summary(model, zero_threshold)
    names = [s.name for s in layers]

    def joined(values) -> str:
        return '-'.join(values)

    row = {
        'model': label,
        'error': error,
        'filters': joined(str(s.filters) for s in layers),
        'channels': joined(str(s.channels) for s in layers),
        'filter_size': joined(f"{s.fibers_per_channel:.3g}" for s in layers),
        'fibers': joined(str(s.fibers) for s in layers),
        'flop': '',
        'speedup': '',
    }
    if flops is not None:
        ratios = {layer.name: layer.ratio for layer in flops.layers}
        row['flop'] = joined(f"{ratios[name]:.1%}" for name in names if name in ratios)
    if speedups:
        row['speedup'] = joined(f"{speedups[name]:.2f}x" for name in names if name in speedups)
    return row


def plot_speedups(rows: Sequence[Mapping], path: Union[str, Path], title: str = 'Speedup over dense GEMM') -> Path:
    """Grouped bar chart of compacted-dense and CSR speedups per layer (needs the ``plot`` extra)."""
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise ConfigError("Plotting needs matplotlib: install StructLearn-SSL[plot]") from e

    structured = {row['layer']: float(row['compacted_dense']) for row in rows
                  if row['pattern'] == 'structured' and row.get('compacted_dense') not in (None, '')}
    unstructured = {row['layer']: float(row['csr_sparse']) for row in rows
                    if row['pattern'] == 'unstructured' and row.get('csr_sparse') not in (None, '')}
    layers = sorted(set(structured) | set(unstructured))
    positions = range(len(layers))
    width = 0.38

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(layers)), 3.2))
    ax.bar([p - width / 2 for p in positions], [structured.get(l, 0.0) for l in layers], width,
           label='structured (compacted GEMM)')
    ax.bar([p + width / 2 for p in positions], [unstructured.get(l, 0.0) for l in layers], width,
           label='non-structured (CSR)')
    ax.axhline(1.0, color='black', linewidth=0.8)
    ax.set_xticks(list(positions))
    ax.set_xticklabels(layers)
    ax.set_ylabel('speedup')
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()

    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
