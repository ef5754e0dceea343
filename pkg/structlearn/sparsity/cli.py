"""Command-line entry point: ``structlearn train | sweep | bench | analyze | fetch-mnist``."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence

from .bench import BenchCase, Kernel, Pattern, alexnet_shape_suite, model_layer_suite, speedup_table, thread_scaling
from .checkpoint import load_checkpoint
from .compactor import detect_zero_groups
from .config import PHASES, ExperimentConfig, load_config
from .datasets import MNIST_URL, fetch_mnist
from .errors import ConfigError, NumericalError, SparsityError, StructuralError
from .pipeline import analyze, run_experiment, run_sweep
from .regularizer import DEFAULT_ZERO_THRESHOLD, SchemeKind
from .reports import BENCH_COLUMNS, PLOT_COLUMNS, bench_rows, plot_speedups, write_csv
from .util import ensure_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def parse_lambda(text: str) -> tuple:
    """``KIND=VALUE`` as used by ``--lambda filter_wise=0.002``."""
    kind, sep, value = text.partition('=')
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KIND=VALUE, got {text!r}")
    try:
        return SchemeKind(kind.strip()), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scheme strength {text!r}")


def _csv_list(cast):
    def parse(text: str) -> List:
        try:
            return [cast(item) for item in text.split(',') if item.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}")
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='structlearn', description=__doc__)
    parser.add_argument('--seed', type=int, help="Override the configured random seed")
    parser.add_argument('--output-dir', type=Path, help="Directory for checkpoints and reports")
    parser.add_argument('--threads', type=int, help="Threads used by the GEMM kernels")
    parser.add_argument('--log-level', default='INFO', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    commands = parser.add_subparsers(dest='command', required=True)

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument('config', type=Path, help="Experiment YAML file")
    experiment.add_argument('--epochs', type=int, help="Override epochs of every phase")
    experiment.add_argument('--phases', type=_csv_list(str), help=f"Comma-separated subset of {','.join(PHASES)}")
    experiment.add_argument('--lambda', dest='strengths', type=parse_lambda, action='append', default=[],
                            metavar='KIND=VALUE', help="Set the strength of a grouping scheme; repeatable")
    experiment.add_argument('--baseline-checkpoint', type=Path, help="Start the ssl phase from this checkpoint")

    commands.add_parser('train', parents=[experiment], help="Run the configured phases")

    sweep = commands.add_parser('sweep', parents=[experiment], help="Run one pipeline per strength")
    sweep.add_argument('--scheme', type=SchemeKind, help="Scheme whose strength is swept")
    sweep.add_argument('--strengths', dest='grid', type=_csv_list(float), help="Comma-separated strength grid")
    sweep.add_argument('--parallel', type=int, default=0, help="Worker processes (default: sequential)")

    bench = commands.add_parser('bench', help="Time dense, compacted and CSR GEMM kernels")
    bench.add_argument('--checkpoint', type=Path, help="Benchmark the conv layers of a trained checkpoint")
    bench.add_argument('--zero-threshold', type=float, default=DEFAULT_ZERO_THRESHOLD)
    bench.add_argument('--m', type=int, help="Custom case: weight rows")
    bench.add_argument('--k', type=int, help="Custom case: weight columns")
    bench.add_argument('--n', type=int, help="Custom case: feature columns")
    bench.add_argument('--row-sparsity', type=float, default=0.0)
    bench.add_argument('--col-sparsity', type=float, default=0.0)
    bench.add_argument('--unstructured-sparsity', type=float)
    bench.add_argument('--kernels', type=_csv_list(Kernel), default=list(Kernel))
    bench.add_argument('--repeats', type=int, default=11)
    bench.add_argument('--warmup', type=int, default=3)
    bench.add_argument('--thread-counts', type=_csv_list(int), help="Rerun the suite at each thread count")
    bench.add_argument('--dtype', default='float64', choices=('float64', 'float32'))
    bench.add_argument('--plot', action='store_true', help="Also draw a speedup bar chart (needs matplotlib)")

    analysis = commands.add_parser('analyze', help="PCA, sparsity or FLOP report of a checkpoint")
    analysis.add_argument('checkpoint', type=Path)
    analysis.add_argument('--mode', choices=('pca', 'stats', 'flops'), required=True)
    analysis.add_argument('--baseline', type=Path, help="Checkpoint to compare against")
    analysis.add_argument('--dims', type=_csv_list(int), help="PCA dimensions (default: all)")
    analysis.add_argument('--zero-threshold', type=float, default=DEFAULT_ZERO_THRESHOLD)
    analysis.add_argument('--output', type=Path, help="Report path (default: <output-dir>/<mode>.csv)")

    fetch = commands.add_parser('fetch-mnist', help="Download the MNIST IDX files")
    fetch.add_argument('directory', type=Path)
    fetch.add_argument('--base-url', default=MNIST_URL)
    fetch.add_argument('--overwrite', action='store_true')
    return parser


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    strengths: Dict[SchemeKind, float] = dict(args.strengths)
    return load_config(args.config).with_overrides(
        seed=args.seed,
        output_dir=args.output_dir,
        epochs=args.epochs,
        phases=args.phases,
        strengths=strengths,
        threads=args.threads,
        baseline_checkpoint=args.baseline_checkpoint,
    )


def cmd_train(args: argparse.Namespace) -> int:
    result = run_experiment(_experiment_config(args))
    for phase, outcome in result.phases.items():
        print(f"{phase}: test error {outcome.test_error:.4f} -> {outcome.checkpoint}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    rows = run_sweep(_experiment_config(args), strengths=args.grid, scheme=args.scheme, parallel=args.parallel)
    for row in rows:
        print(f"{row['scheme']}={row['strength']:g}: {row['status']} test error {row['test_error']}")
    return EXIT_OK


def _bench_cases(args: argparse.Namespace) -> Sequence[BenchCase]:
    seed = args.seed or 0
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint).model
        return model_layer_suite(model, detect_zero_groups(model, args.zero_threshold), seed)
    dims = (args.m, args.k, args.n)
    if any(d is not None for d in dims):
        if None in dims:
            raise ConfigError("A custom case needs all of --m, --k and --n")
        cases = [BenchCase('custom', *dims, args.row_sparsity, args.col_sparsity, seed=seed)]
        if args.unstructured_sparsity is not None:
            cases.append(BenchCase('custom', *dims, pattern=Pattern.UNSTRUCTURED,
                                   unstructured_sparsity=args.unstructured_sparsity, seed=seed))
        return cases
    return alexnet_shape_suite(seed)


def cmd_bench(args: argparse.Namespace) -> int:
    out = ensure_dir(args.output_dir or Path('runs'))
    thread_counts = args.thread_counts or [args.threads or 1]
    records = thread_scaling(_bench_cases(args), thread_counts, args.kernels, args.repeats, args.warmup, args.dtype)
    write_csv(out / 'bench.csv', BENCH_COLUMNS, bench_rows(records))
    table = speedup_table(records)
    write_csv(out / 'bench_plot.csv', PLOT_COLUMNS, table)
    if args.plot:
        plot_speedups(table, out / 'bench_speedup.png')
    for row in table:
        print(f"{row['layer']:>8} {row['pattern']:<12} T={row['threads']} "
              + ' '.join(f"{kernel.value}={row[kernel.value]:.2f}x" for kernel in Kernel if kernel.value in row))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    output = args.output or ensure_dir(args.output_dir or Path('runs')) / f"{args.mode}.csv"
    rows = analyze(args.checkpoint, args.mode, output, args.baseline, args.zero_threshold, args.dims)
    print(f"{len(rows)} rows -> {output}")
    return EXIT_OK


def cmd_fetch_mnist(args: argparse.Namespace) -> int:
    for path in fetch_mnist(args.directory, args.base_url, overwrite=args.overwrite):
        print(path)
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'sweep': cmd_sweep,
    'bench': cmd_bench,
    'analyze': cmd_analyze,
    'fetch-mnist': cmd_fetch_mnist,
}


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    if args.threads is not None and args.threads < 1:
        logger.error("--threads must be positive")
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, StructuralError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except SparsityError as e:
        logger.error("%s", e)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
