"""Loss, optimizer, training loop and evaluation metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .exceptions import ConfigurationError, DataError, TrainingDiverged
from .model import PGGCNModel, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss,train_acc,eval_acc"


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 16
    weight_decay: float = 1e-4
    epochs: int = 200
    schedule: str = "step"          # "step" or "constant"
    milestones: tuple | None = None  # default: 60% and 80% of the epochs
    decay_factor: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be at least 2 (batch normalization)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.schedule not in ("step", "constant"):
            raise ConfigurationError("schedule must be 'step' or 'constant'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        if self.schedule == "constant":
            return self.learning_rate
        milestones = self.milestones
        if milestones is None:
            milestones = (int(0.6 * self.epochs), int(0.8 * self.epochs))
        drops = sum(epoch >= m for m in milestones)
        return self.learning_rate * self.decay_factor ** drops


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = logits[None]
        labels = labels.reshape(1)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DataError(f"{labels.shape[0] if labels.ndim else 1} labels for {b} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b


class SGD:
    """Plain SGD with L2 weight decay on flagged params.

    ``p <- p - lr * (g + wd * p)`` for tensors with ``decay=True``, ``p <- p - lr * g``
    otherwise.  Gradients are zeroed after every step.
    """

    def __init__(self, params, weight_decay=0.0, momentum=0.0):
        self.params = [p for p in params if p.trainable]
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.value) for p in self.params] if momentum else None

    def step(self, lr):
        for i, p in enumerate(self.params):
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            if self._velocity is not None:
                v = self._velocity[i]
                v *= self.momentum
                v += g
                g = v
            p.value -= lr * g
            p.zero_grad()


def sgd_step(params, lr, weight_decay=0.0):
    SGD(params, weight_decay).step(lr)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray               # rows: true class, columns: predicted

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes):
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def top1(self) -> float:
        return int(np.trace(self.counts)) / self.total

    def normalized(self):
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self, normalized=False) -> str:
        if normalized:
            return "".join(",".join(repr(float(v)) for v in row) + "\n"
                           for row in self.normalized())
        return "".join(",".join(str(int(v)) for v in row) + "\n" for row in self.counts)

    def save(self, path):
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_name(path.stem + "_normalized" + path.suffix).write_text(
            self.to_csv(normalized=True))


@dataclass
class EvalResult:
    top1: float
    confusion: ConfusionMatrix
    predictions: np.ndarray


def predict_logits(model: PGGCNModel, dataset: Dataset, batch_size=64):
    was_training = model.training
    model.eval()
    try:
        out = [model.forward(dataset.skeleton[i:i + batch_size], dataset.pose[i:i + batch_size])
               for i in range(0, len(dataset), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate(model: PGGCNModel, dataset: Dataset, batch_size=64) -> EvalResult:
    if dataset is None or len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    preds = np.argmax(predict_logits(model, dataset, batch_size), axis=1)
    cm = ConfusionMatrix.from_predictions(dataset.labels, preds, dataset.num_classes)
    return EvalResult(cm.top1, cm, preds)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.train_acc!r},{self.eval_acc!r}"


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float = -math.inf
    checkpoint: Path | None = None


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        # a single leftover sample cannot be batch-normalized on its own
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _snapshot(model):
    return [v.value.copy() if hasattr(v, "value") else v.copy()
            for _, v in model.state_entries()]


def _restore(model, snap):
    for (_, v), arr in zip(model.state_entries(), snap):
        (v.value if hasattr(v, "value") else v)[...] = arr


def _diverged(model, last_good, checkpoint_path, epoch, lr):
    _restore(model, last_good)
    saved = None
    if checkpoint_path is not None:
        saved = Path(checkpoint_path).with_suffix(".last_good.ckpt")
        save_checkpoint(saved, model)
    raise TrainingDiverged(f"non-finite values at epoch {epoch + 1} (lr={lr})", epoch + 1, saved)


def train_loop(model: PGGCNModel, train_set: Dataset, config: TrainConfig,
               eval_set: Dataset | None = None, log_path=None, checkpoint_path=None,
               on_epoch=None) -> TrainResult:
    """Seeded mini-batch SGD with cross-entropy.

    Writes ``epoch,loss,train_acc,eval_acc`` lines to ``log_path`` (``nan``
    eval accuracy without an eval set) and saves the best checkpoint, judged
    by eval accuracy, else training accuracy, to ``checkpoint_path``.  A
    non-finite loss or parameter raises :class:`TrainingDiverged` after
    restoring the state from the end of the previous epoch (also written
    next to the checkpoint).  ``on_epoch`` is called with each
    :class:`EpochRecord`; a truthy return stops training.
    """
    if len(train_set) < 2:
        raise ConfigurationError("training needs at least two samples")
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.params(), config.weight_decay, config.momentum)
    result = TrainResult()
    if log_path is not None:
        Path(log_path).write_text(LOG_HEADER + "\n")
    last_good = _snapshot(model)
    model.zero_grad()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        model.train()
        total_loss, correct = 0.0, 0
        for idx in _batches(len(train_set), config.batch_size, rng):
            logits = model.forward(train_set.skeleton[idx], train_set.pose[idx])
            loss, grad = cross_entropy(logits, train_set.labels[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(logits)):
                _diverged(model, last_good, checkpoint_path, epoch, lr)
            model.backward(grad)
            opt.step(lr)
            total_loss += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == train_set.labels[idx]).sum())
        snap = _snapshot(model)
        if not all(np.all(np.isfinite(v)) for v in snap):
            _diverged(model, last_good, checkpoint_path, epoch, lr)
        last_good = snap
        train_acc = correct / len(train_set)
        eval_acc = evaluate(model, eval_set, config.eval_batch_size).top1 if eval_set else math.nan
        rec = EpochRecord(epoch + 1, total_loss / len(train_set), train_acc, eval_acc)
        result.history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.csv() + "\n")
        score = eval_acc if eval_set else train_acc
        if score > result.best_score:
            result.best_score = score
            result.best_epoch = rec.epoch
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, {"epoch": rec.epoch})
                result.checkpoint = Path(checkpoint_path)
        log.info("epoch %d loss %.4f train %.3f eval %.3f", rec.epoch, rec.loss, train_acc, eval_acc)
        if on_epoch is not None and on_epoch(rec):
            break
    return result


def read_log(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise DataError(f"{path}: not a training log")
    out = []
    for line in lines[1:]:
        e, l, tr, ev = line.split(",")
        out.append(EpochRecord(int(e), float(l), float(tr), float(ev)))
    return out
