"""Phase orchestration (baseline, ssl, compact, finetune), lambda sweeps and checkpoint analysis."""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .bench import Kernel, model_layer_suite, run_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .compactor import CompactPlan, FlopReport, apply_plan, detect_zero_groups, flop_report, pca_rank_analysis
from .config import PHASES, ExperimentConfig, dump_config
from .datasets import Dataset, load_dataset
from .errors import ConfigError, DatasetError, NumericalError, SparsityError, StructuralError
from .network import LayerKind, NetworkModel, evaluate
from .regularizer import GroupingScheme, SchemeKind, SslConfig, build_terms, group_max_abs, sparsity_stats
from .reports import (FLOP_COLUMNS, MAX_ABS_COLUMNS, METRICS_COLUMNS, PCA_COLUMNS, STATS_COLUMNS,
                      STRUCTURE_COLUMNS, SWEEP_COLUMNS, TABLE_COLUMNS, flop_rows, format_detail,
                      max_abs_rows, metrics_rows, structure_rows, table_row, write_csv)
from .training import History, train
from .util import ensure_dir

logger = logging.getLogger(__name__)

CHECKPOINT_NAMES = {phase: f"{phase}.ckpt" for phase in PHASES}
REPORT_NAME = 'report.csv'
SWEEP_NAME = 'sweep.csv'


@dataclass
class PhaseResult:
    phase: str
    checkpoint: Path
    test_error: float
    history: Optional[History] = None


@dataclass
class RunResult:
    output_dir: Path
    phases: Dict[str, PhaseResult] = field(default_factory=dict)
    plan: Optional[CompactPlan] = None
    flops: Optional[FlopReport] = None
    report: List[dict] = field(default_factory=list)

    @property
    def final_error(self) -> float:
        return list(self.phases.values())[-1].test_error if self.phases else float('nan')


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    dataset = load_dataset(cfg.dataset.format, cfg.dataset.path)
    if cfg.dataset.train_limit or cfg.dataset.test_limit:
        dataset = dataset.subset(cfg.dataset.train_limit, cfg.dataset.test_limit)
    return dataset


def _metadata(cfg: ExperimentConfig, phase: str, history: Optional[History], error: float) -> dict:
    metadata = {
        'phase': phase,
        'seed': cfg.train.seed,
        'test_error': float(error),
    }
    if history is not None and history.final is not None:
        metadata['epochs'] = len(history)
        metadata['train_loss'] = float(history.final.train_loss)
    return metadata


def _load_phase_input(cfg: ExperimentConfig, phase: str, previous: str) -> Tuple[NetworkModel, Optional[CompactPlan]]:
    """The checkpoint ``phase`` starts from when the previous phase did not run in this invocation."""
    if previous == 'baseline' and cfg.baseline_checkpoint is not None:
        path = cfg.baseline_checkpoint
    else:
        path = cfg.output_dir / CHECKPOINT_NAMES[previous]
    if not path.is_file():
        raise ConfigError(f"The {phase} phase needs the {previous} checkpoint {path}")
    checkpoint = load_checkpoint(path)
    return checkpoint.model, checkpoint.plan


def _write_metrics(cfg: ExperimentConfig, phase: str, history: History):
    write_csv(cfg.output_dir / f"{phase}_metrics.csv", METRICS_COLUMNS, metrics_rows(history, phase))


def _speedups(model: NetworkModel, plan: CompactPlan, threads: int) -> Dict[str, float]:
    records = run_bench(model_layer_suite(model, plan), kernels=(Kernel.DENSE, Kernel.COMPACTED_DENSE),
                        repeats=5, warmup=1, threads=threads)
    return {r.case.layer_name: r.speedup_vs_dense for r in records if r.kernel is Kernel.COMPACTED_DENSE}


def run_experiment(cfg: ExperimentConfig, dataset: Dataset = None) -> RunResult:
    """Run the configured phases in order, chaining models through checkpoints in ``cfg.output_dir``.

    A phase whose predecessor did not run in this invocation loads the
    predecessor's checkpoint, so rerunning a later phase reproduces a full run.

    Raises:
        ConfigError: a required checkpoint is missing or the SSL schemes do not fit the network.
        TrainingDiverged: the loss became NaN in some epoch.
    """
    out = ensure_dir(cfg.output_dir)
    dump_config(cfg, out / 'config.yaml')
    if cfg.ssl is not None and 'ssl' in cfg.phases:
        build_terms(cfg.build_model(), cfg.ssl)
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    result = RunResult(out)

    model, plan, source = None, None, None
    previous = None
    for phase in PHASES:
        if phase not in cfg.phases:
            previous = phase
            continue
        logger.info({"message": "Phase started.", "phase": phase, "output_dir": str(out)})
        if phase != 'baseline' and model is None:
            model, plan = _load_phase_input(cfg, phase, previous)

        history = None
        if phase == 'baseline':
            model, history = train(cfg.build_model(), dataset, cfg.train_config_for(phase), None, phase)
        elif phase == 'ssl':
            model, history = train(model, dataset, cfg.train_config_for(phase), cfg.ssl, phase)
        elif phase == 'compact':
            source = model
            plan = detect_zero_groups(source, cfg.zero_threshold)
            model = apply_plan(source, plan)
            result.plan = plan
            result.flops = flop_report(source, model)
            write_csv(out / 'compact_flops.csv', FLOP_COLUMNS, flop_rows(result.flops))
            write_csv(out / 'compact_structure.csv', STRUCTURE_COLUMNS, structure_rows(model))
        elif phase == 'finetune':
            model, history = train(model, dataset, cfg.train_config_for(phase), None, phase)

        if history is not None:
            _write_metrics(cfg, phase, history)
            error = history.final.test_error if history.final else evaluate(
                model, dataset.test_images, dataset.test_labels)[1]
        else:
            error = evaluate(model, dataset.test_images, dataset.test_labels)[1]

        path = save_checkpoint(out / CHECKPOINT_NAMES[phase], model, _metadata(cfg, phase, history, error),
                               plan if phase in ('compact', 'finetune') else None)
        result.phases[phase] = PhaseResult(phase, path, error, history)
        logger.info({"message": "Phase finished.", "phase": phase, "test_error": error})

        if phase in ('compact', 'finetune'):
            flops = result.flops if result.flops is not None else _flops_from_disk(cfg, model)
            speedups = _speedups(source, plan, cfg.threads) if cfg.report_speedup and source is not None else None
            result.report.append(table_row(phase, error, model, flops, speedups, cfg.zero_threshold))
        elif phase == 'baseline':
            result.report.insert(0, table_row(phase, error, model))
        previous = phase

    if result.report:
        write_csv(out / REPORT_NAME, TABLE_COLUMNS, result.report)
    return result


def _flops_from_disk(cfg: ExperimentConfig, model: NetworkModel) -> Optional[FlopReport]:
    path = cfg.output_dir / CHECKPOINT_NAMES['ssl']
    if not path.is_file():
        return None
    return flop_report(load_checkpoint(path).model, model)


@dataclass(frozen=True)
class SweepPoint:
    scheme: SchemeKind
    strength: float
    config: ExperimentConfig


SWEEP_FAILURES = (
    (NumericalError, 'diverged'),
    (StructuralError, 'structural'),
    (ConfigError, 'config'),
    (DatasetError, 'io'),
)


def _failure_status(error: SparsityError) -> str:
    for kind, status in SWEEP_FAILURES:
        if isinstance(error, kind):
            return status
    return 'failed'


def _sweep_row(point: SweepPoint, dataset: Optional[Dataset]) -> dict:
    row = {
        'scheme': point.scheme.value,
        'strength': point.strength,
        'output_dir': str(point.config.output_dir),
    }
    try:
        result = run_experiment(point.config, dataset)
    except SparsityError as e:
        status = _failure_status(e)
        logger.warning({"message": "Sweep point failed.", "scheme": point.scheme.value,
                        "strength": point.strength, "status": status, "error": str(e)})
        row.update(status=status, test_error=float('nan'), message=str(e))
        return row

    ssl_phase = result.phases.get('ssl')
    final = ssl_phase.history.final if ssl_phase and ssl_phase.history else None
    row.update(
        status='ok',
        test_error=result.final_error,
        group_sparsity=final.group_sparsity if final else 0.0,
        sparsity_detail=format_detail(final.sparsity) if final else '',
        flop_ratio=result.flops.ratio if result.flops else '',
    )
    return row


def _point_dir(root: Path, scheme: SchemeKind, strength: float) -> Path:
    return root / f"{scheme.value}_{strength:g}"


def run_sweep(cfg: ExperimentConfig, strengths: Sequence[float] = None, scheme: SchemeKind = None,
              parallel: int = 0, dataset: Dataset = None) -> List[dict]:
    """Run one pipeline per strength of ``scheme``, sharing a single baseline.

    A failed run is recorded with its status (``diverged``, ``structural``,
    ``config`` or ``io``) and message, and the sweep goes on. ``parallel > 1``
    runs grid points in that many worker processes.
    """
    if scheme is None or strengths is None:
        if cfg.sweep is None:
            raise ConfigError("No sweep grid: pass strengths or add a `sweep` section")
        scheme = cfg.sweep.scheme if scheme is None else scheme
        strengths = cfg.sweep.strengths if strengths is None else strengths
    scheme = SchemeKind(scheme)
    strengths = [float(s) for s in strengths]
    if not strengths:
        raise ConfigError("Sweep grid is empty")

    root = ensure_dir(cfg.output_dir)
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    phases = tuple(phase for phase in cfg.phases if phase != 'baseline') or ('ssl',)
    if 'ssl' not in phases:
        raise ConfigError("A sweep needs the ssl phase")
    baseline = cfg.baseline_checkpoint
    if 'baseline' in cfg.phases:
        shared = replace(cfg, phases=('baseline',), output_dir=root / 'baseline')
        baseline = run_experiment(shared, dataset).phases['baseline'].checkpoint

    points = [
        SweepPoint(scheme, strength, cfg.with_overrides(
            output_dir=_point_dir(root, scheme, strength),
            phases=phases,
            strengths={scheme: strength},
            baseline_checkpoint=baseline,
        ))
        for strength in strengths
    ]

    if parallel and parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_row, points, [dataset] * len(points)))
    else:
        rows = [_sweep_row(point, dataset) for point in points]

    write_csv(root / SWEEP_NAME, SWEEP_COLUMNS, rows)
    logger.info({"message": "Sweep finished.", "scheme": scheme.value, "points": len(rows),
                 "failed": sum(row['status'] != 'ok' for row in rows)})
    return rows


def default_stats_config(model: NetworkModel, zero_threshold: float) -> SslConfig:
    """Filter, channel and shape groups on conv layers plus neuron groups on FC layers."""
    kinds = {layer.kind for layer in model.weighted_layers}
    schemes = []
    if LayerKind.CONV in kinds:
        schemes += [GroupingScheme(SchemeKind.FILTER_WISE), GroupingScheme(SchemeKind.CHANNEL_WISE),
                    GroupingScheme(SchemeKind.SHAPE_WISE)]
    if LayerKind.FC in kinds:
        schemes += [GroupingScheme(SchemeKind.NEURON_WISE_IN), GroupingScheme(SchemeKind.NEURON_WISE_OUT)]
    return SslConfig(tuple(schemes), zero_threshold=zero_threshold, couple_filter_channel=False)


def _check_same_topology(model: NetworkModel, baseline: NetworkModel):
    left = [(layer.name, layer.params.values.shape) for layer in model.weighted_layers]
    right = [(layer.name, layer.params.values.shape) for layer in baseline.weighted_layers]
    if [name for name, _ in left] != [name for name, _ in right]:
        raise ConfigError("Checkpoint and baseline have different layers")
    return left, right


def pca_rows(model: NetworkModel, source: str, dims: Iterable[int] = None,
             layers: Sequence[str] = None) -> List[dict]:
    rows = []
    for layer in model.weighted_layers:
        if layers and layer.name not in layers:
            continue
        limit = min(layer.params.n_filters, layer.params.fiber_count)
        wanted = range(0, limit + 1) if dims is None else dims
        for dim, error in pca_rank_analysis(layer.params, wanted):
            rows.append({'source': source, 'layer': layer.name, 'dim': dim, 'error': error})
    return rows


def analyze(checkpoint: Path, mode: str, output: Path, baseline_checkpoint: Path = None,
            zero_threshold: float = 1e-4, dims: Iterable[int] = None, ssl: SslConfig = None) -> List[dict]:
    """Write a pca / stats / flops report for ``checkpoint`` to ``output`` and return its rows.

    Raises:
        ConfigError: unknown mode, or the baseline's layers differ from the checkpoint's.
    """
    model = load_checkpoint(checkpoint).model
    baseline = load_checkpoint(baseline_checkpoint).model if baseline_checkpoint else None
    dims = list(dims) if dims is not None else None

    if mode == 'pca':
        rows = pca_rows(model, 'checkpoint', dims)
        if baseline is not None:
            left, right = _check_same_topology(model, baseline)
            if left != right:
                raise ConfigError("PCA comparison needs matching layer shapes; compare before compaction")
            rows += pca_rows(baseline, 'baseline', dims)
        columns = PCA_COLUMNS
    elif mode == 'stats':
        ssl = ssl or default_stats_config(model, zero_threshold)
        rows = [
            {'scheme': r.scheme, 'layer': r.layer, 'groups': r.n_groups, 'zero_groups': r.n_zero,
             'gap_groups': r.n_gap, 'sparsity': r.fraction}
            for r in sparsity_stats(model, ssl)
        ]
        write_csv(Path(output).with_name(Path(output).stem + '_structure.csv'), STRUCTURE_COLUMNS,
                  structure_rows(model, zero_threshold))
        write_csv(Path(output).with_name(Path(output).stem + '_max_abs.csv'), MAX_ABS_COLUMNS,
                  max_abs_rows(group_max_abs(model, ssl)))
        columns = STATS_COLUMNS
    elif mode == 'flops':
        if baseline is not None:
            missing = {layer.name for layer in model.weighted_layers} - {layer.name for layer in baseline.weighted_layers}
            if missing:
                raise ConfigError(f"Layers {sorted(missing)} are not in the baseline")
            report = flop_report(baseline, model)
        else:
            report = flop_report(model, apply_plan(model, detect_zero_groups(model, zero_threshold)))
        rows = flop_rows(report)
        columns = FLOP_COLUMNS
    else:
        raise ConfigError(f"Unknown analysis mode {mode!r}; choose pca, stats or flops")

    write_csv(output, columns, rows)
    logger.info({"message": "Analysis written.", "mode": mode, "path": str(output), "rows": len(rows)})
    return rows
