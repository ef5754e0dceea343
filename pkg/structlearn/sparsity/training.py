"""Mini-batch SGD with momentum, weight decay and optional structured regularization."""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pendulum

from .errors import ConfigError, TrainingDiverged
from .network import Gradients, NetworkModel, backward, evaluate, forward
from .regularizer import SslConfig, build_terms, regularizer_grads, sparsity_stats, ssl_objective
from .util import format_duration

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 10
    lr_schedule: Tuple[Tuple[int, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        schedule = tuple((int(epoch), float(multiplier)) for epoch, multiplier in self.lr_schedule)
        object.__setattr__(self, 'lr_schedule', schedule)
        if not self.learning_rate > 0:
            raise ConfigError("`learning_rate` must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("`momentum` must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("`weight_decay` must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("`batch_size` must be positive")
        if self.epochs < 0:
            raise ConfigError("`epochs` must be non-negative")
        epochs = [epoch for epoch, _ in schedule]
        if any(later <= earlier for earlier, later in zip(epochs, epochs[1:])):
            raise ConfigError("`lr_schedule` epochs must be strictly increasing")
        if any(multiplier <= 0 for _, multiplier in schedule):
            raise ConfigError("`lr_schedule` multipliers must be positive")

    def rate_at(self, epoch: int) -> float:
        """Base rate times the multiplier of the latest schedule entry at or before ``epoch``."""
        multiplier = 1.0
        for start, value in self.lr_schedule:
            if start <= epoch:
                multiplier = value
        return self.learning_rate * multiplier

    def scaled(self, factor: float) -> 'TrainConfig':
        return replace(self, learning_rate=self.learning_rate * factor)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    learning_rate: float
    train_loss: float
    test_loss: float
    test_error: float
    objective: float = float('nan')
    sparsity: Dict[str, float] = field(default_factory=dict)
    group_sparsity: float = 0.0
    seconds: float = 0.0


@dataclass
class History:
    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.epochs[-1] if self.epochs else None

    def __len__(self):
        return len(self.epochs)


def sgd_step(model: NetworkModel, grads: Gradients, reg_grads: Optional[Gradients], cfg: TrainConfig,
             learning_rate: float = None) -> NetworkModel:
    """One momentum step: ``v <- mu*v - lr*(g + wd*w + g_ssl)``; ``w <- w + v``.

    Weight decay applies to weights, not biases. Fibers outside a layer's
    fiber mask are never updated. The model is updated in place and returned.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    for layer in model.weighted_layers:
        params, name = layer.params, layer.name
        g_w = grads.weights.get(name, 0.0) + cfg.weight_decay * params.values
        g_b = grads.bias.get(name, 0.0)
        if reg_grads is not None:
            g_w = g_w + reg_grads.weights.get(name, 0.0)
            g_b = g_b + reg_grads.bias.get(name, 0.0)

        v_w, v_b = model.velocity.get(name, (None, None))
        if v_w is None or v_w.shape != params.values.shape:
            v_w, v_b = np.zeros_like(params.values), np.zeros_like(params.bias)

        v_w = cfg.momentum * v_w - lr * g_w
        v_b = cfg.momentum * v_b - lr * g_b
        if params.fiber_mask is not None:
            v_w = v_w * params.fiber_mask.reshape((1,) + params.values.shape[1:])

        params.values = params.values + v_w
        params.bias = params.bias + v_b
        model.velocity[name] = (v_w, v_b)
    return model


def _sparsity_summary(model: NetworkModel, ssl: SslConfig) -> Tuple[Dict[str, float], float]:
    records = sparsity_stats(model, ssl)
    detail = {f"{record.scheme}:{record.layer}": record.fraction for record in records}
    total = sum(record.n_groups for record in records)
    zero = sum(record.n_zero for record in records)
    return detail, (zero / total if total else 0.0)


def train(model: NetworkModel, dataset, cfg: TrainConfig, ssl: Optional[SslConfig] = None,
          phase: str = 'train') -> Tuple[NetworkModel, History]:
    """Train a copy of ``model`` on ``dataset.train_images`` / ``dataset.train_labels``.

    Args:
        model: Starting point; left untouched.
        dataset: Anything with ``train_images``, ``train_labels``, ``test_images``
            and ``test_labels`` arrays.
        cfg: Optimizer settings. Batches are drawn from a permutation seeded by
            ``cfg.seed``, so a single-threaded run is reproducible bit for bit.
        ssl: When given, its group Lasso terms are added to every step and
            per-epoch group sparsity is recorded.
        phase: Label used in log records.

    Returns:
        The trained model and its per-epoch history.

    Raises:
        TrainingDiverged: The mini-batch loss became NaN or infinite.
    """
    images, labels = dataset.train_images, dataset.train_labels
    if len(labels) == 0:
        raise ConfigError("Training set is empty")

    model = model.copy()
    terms = build_terms(model, ssl) if ssl is not None else None
    rng = np.random.default_rng(cfg.seed)
    history = History()

    for epoch in range(cfg.epochs):
        started = pendulum.now()
        lr = cfg.rate_at(epoch)
        order = rng.permutation(len(labels))
        loss_sum = 0.0

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            logits, cache = forward(model, images[batch])
            grads = backward(model, cache, labels[batch])
            if not np.isfinite(grads.loss):
                raise TrainingDiverged(epoch, grads.loss)
            reg = regularizer_grads(model, ssl, terms) if ssl is not None else None
            sgd_step(model, grads, reg, cfg, learning_rate=lr)
            loss_sum += grads.loss * len(batch)

        train_loss = loss_sum / len(order)
        if len(dataset.test_labels):
            test_loss, test_error = evaluate(model, dataset.test_images, dataset.test_labels)
        else:
            test_loss, test_error = float('nan'), float('nan')
        objective, _ = ssl_objective(model, train_loss, ssl, cfg.weight_decay, terms)
        detail, group_sparsity = _sparsity_summary(model, ssl) if ssl is not None else ({}, 0.0)
        seconds = (pendulum.now() - started).total_seconds()

        metrics = EpochMetrics(epoch, lr, train_loss, test_loss, test_error, objective,
                               detail, group_sparsity, seconds)
        history.epochs.append(metrics)
        logger.info({
            "message": "Epoch finished.",
            "phase": phase,
            "epoch": epoch,
            "learning_rate": lr,
            "train_loss": round(train_loss, 6),
            "test_error": test_error,
            "group_sparsity": round(group_sparsity, 4),
            "duration": format_duration(seconds),
        })

    return model, history
