"""
Training and evaluation loops.

train_loop runs seeded AdamW epochs over a LabeledSamples split, evaluates
the held-out split after every epoch, writes one metrics CSV row per
(epoch, split) and persists the parameters of the best held-out epoch.
Every random choice derives from the run seed, so identical settings give
identical metrics files.
"""

import csv
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

import autograd as ag
from autograd import Node
from checkpoint import save_checkpoint
from data import LabeledSamples, iterate_batches
from model import ModelConfig, ModelParams, init_model, model_forward, predict
from numerics import ContractError, Rng, Tensor
from optim import AdamWHParams, adamw_step, init_optim_state


logger = logging.getLogger(__name__)

METRICS_HEADER = ['epoch', 'split', 'loss', 'accuracy']
METRICS_FILE = 'metrics.csv'
CHECKPOINT_FILE = 'checkpoint.v2m'


def cross_entropy_loss(logits, labels: np.ndarray) -> Node:
    """
    Mean negative log-likelihood of the true labels.

    Args:
        logits: (B, C) Node or array
        labels: (B,) integers in [0, C)

    Returns:
        Scalar Node
    """
    logits = ag.constant(logits)
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} and labels {labels.shape} do not pair up")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"labels must be integers, got {labels.dtype}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    return ag.log_softmax_nll(logits, labels)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float

    def row(self) -> List[str]:
        return [str(self.epoch), self.split, repr(float(self.loss)), repr(float(self.accuracy))]


@dataclass
class EvalReport:
    """Held-out metrics for one parameter set."""

    loss: float
    accuracy: float
    top_k_accuracy: float
    k: int
    confusion: np.ndarray   # (C, C) counts, rows true class, columns prediction

    @property
    def count(self) -> int:
        return int(self.confusion.sum())


@dataclass
class TrainSettings:
    """Loop settings that are not part of the model shape."""

    epochs: int = 20
    batch_size: int = 64
    hparams: AdamWHParams = field(default_factory=AdamWHParams)
    warmup_epochs: int = 1
    seed: int = 0
    augment_flip: bool = False
    prefetch: int = 2
    config_echo: str = ''


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = float('nan')
    best_values: Dict[str, Tensor] = field(default_factory=OrderedDict)

    @property
    def final_test_accuracy(self) -> float:
        rows = [m.accuracy for m in self.history if m.split == 'test']
        return rows[-1] if rows else float('nan')


def write_metrics_csv(path: str, rows: List[EpochMetrics]):
    """Write the metrics history with its header."""
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(METRICS_HEADER)
            for metrics in rows:
                writer.writerow(metrics.row())
    except OSError as e:
        logger.error(f"Failed to write metrics {path}: {e}")
        raise


def evaluate(params: ModelParams, config: ModelConfig, samples: LabeledSamples,
             batch_size: int = 256) -> EvalReport:
    """
    Loss, top-1, top-k accuracy and confusion counts on a split.

    k is min(5, num_classes).
    """
    C = config.num_classes
    k = min(5, C)
    confusion = np.zeros((C, C), dtype=np.int64)
    if len(samples) == 0:
        return EvalReport(float('nan'), float('nan'), float('nan'), k, confusion)
    logits = predict(params, config, samples.images.astype(config.dtype), batch_size)
    labels = samples.labels
    loss = float(cross_entropy_loss(logits.astype(np.float64), labels).value)
    ranked = np.argsort(-logits, axis=1, kind='stable')
    predicted = ranked[:, 0]
    np.add.at(confusion, (labels, predicted), 1)
    accuracy = float(np.mean(predicted == labels))
    top_k = float(np.mean(np.any(ranked[:, :k] == labels[:, None], axis=1)))
    return EvalReport(loss, accuracy, top_k, k, confusion)


def _snapshot(params: ModelParams) -> Dict[str, Tensor]:
    return OrderedDict((name, value.copy()) for name, value in params.values().items())


def train_loop(config: ModelConfig, train: LabeledSamples, test: LabeledSamples,
               settings: TrainSettings, out_dir: Optional[str] = None,
               params: Optional[ModelParams] = None) -> TrainResult:
    """
    Train a V2M classifier.

    Args:
        config: model configuration
        train: training split
        test: held-out split
        settings: loop settings
        out_dir: directory for metrics.csv and checkpoint.v2m, None keeps everything in memory
        params: starting parameters, freshly initialized from the seed when None

    Returns:
        TrainResult with the history and the best held-out parameters
    """
    if settings.batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if params is None:
        params = init_model(config, seed=settings.seed)
    steps_per_epoch = -(-len(train) // settings.batch_size)
    state = init_optim_state(params.named(), settings.hparams,
                             warmup_steps=settings.warmup_epochs * steps_per_epoch,
                             total_steps=settings.epochs * steps_per_epoch)
    result = TrainResult(params=params, best_values=_snapshot(params))
    metrics_path = os.path.join(out_dir, METRICS_FILE) if out_dir else None
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILE) if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(metrics_path, [])
    if checkpoint_path and settings.epochs == 0:
        save_checkpoint(checkpoint_path, result.best_values, settings.config_echo)

    root = Rng(settings.seed).spawn('train')
    named = params.named()
    for epoch in range(1, settings.epochs + 1):
        batches = iterate_batches(train, settings.batch_size, root.spawn(f"epoch.{epoch}"),
                                  settings.augment_flip, settings.prefetch, config.dtype)
        loss_sum, correct, seen = 0.0, 0, 0
        for images, labels in batches:
            logits = model_forward(images, config, params)
            loss = cross_entropy_loss(logits, labels)
            grads = ag.backward(loss, named.values())
            adamw_step(named, grads, state)
            loss_sum += float(loss.value) * len(labels)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == labels))
            seen += len(labels)
        train_metrics = EpochMetrics(epoch, 'train', loss_sum / max(seen, 1), correct / max(seen, 1))
        report = evaluate(params, config, test, settings.batch_size)
        test_metrics = EpochMetrics(epoch, 'test', report.loss, report.accuracy)
        result.history.extend([train_metrics, test_metrics])
        logger.info(f"Epoch {epoch}/{settings.epochs}: train loss {train_metrics.loss:.4f} "
                    f"acc {train_metrics.accuracy:.4f}, test loss {report.loss:.4f} "
                    f"acc {report.accuracy:.4f}, lr {state.lr():.2e}")

        if not report.accuracy <= result.best_accuracy:
            result.best_accuracy = report.accuracy
            result.best_epoch = epoch
            result.best_values = _snapshot(params)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, result.best_values, settings.config_echo)
        if metrics_path:
            write_metrics_csv(metrics_path, result.history)

    logger.info(f"Training finished: final test accuracy {result.final_test_accuracy:.4f}, "
                f"best {result.best_accuracy:.4f} at epoch {result.best_epoch}")
    return result
