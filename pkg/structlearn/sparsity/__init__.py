from .errors import (SparsityError, ShapeError, ConfigError, StructuralError, DatasetError, CheckpointError,
                     NumericalError, TrainingDiverged, ChecksumMismatch)
from .network import LayerKind, LayerSpec, WeightTensor4D, Layer, NetworkModel, forward, backward, evaluate
from .presets import build_preset, build_from_layers
from .training import TrainConfig, train, sgd_step
from .regularizer import SchemeKind, GroupingScheme, SslConfig, enumerate_groups, group_lasso_value, group_lasso_grad
from .compactor import CompactPlan, detect_zero_groups, apply_plan, hard_zero, flop_report
from .bench import BenchCase, Kernel, run_bench, alexnet_shape_suite
from .checkpoint import save_checkpoint, load_checkpoint
from .config import ExperimentConfig, load_config
from .datasets import Dataset, load_mnist, load_cifar10
from .pipeline import run_experiment, run_sweep, analyze
