"""Mini-batch training with Adam and a step-decay learning-rate schedule."""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._config import no_grad, worker_count
from .errors import ShapeError, TrainingError
from .tensor import Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr0: float = 1e-4
    lr_decay: float = 0.8
    decay_every: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def lr_at(self, epoch):
        """Learning rate of 0-based ``epoch``: ``lr0 * lr_decay ** (epoch // decay_every)``."""
        return self.lr0 * self.lr_decay ** (epoch // self.decay_every)


class Adam:
    """Adam with bias correction; moments live on each :class:`Parameter`."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.step_count += 1
            t = p.step_count
            p.moment1 = b1 * p.moment1 + (1 - b1) * g
            p.moment2 = b2 * p.moment2 + (1 - b2) * g * g
            m_hat = p.moment1 / (1 - b1 ** t)
            v_hat = p.moment2 / (1 - b2 ** t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    valid_accuracy: float
    train_accuracy: float = float("nan")
    seconds: float = 0.0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid_accuracy: float = float("nan")
    best_state: dict = None
    final_state: dict = None

    def write_history(self, path):
        write_history_csv(path, self.history)


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "valid_accuracy")


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss),
                             repr(rec.valid_accuracy)])


def _as_batch(model, images):
    x = np.asarray(images, dtype=model.dtype)
    if x.ndim == 3:
        x = x[:, None]
    return x


def predict_logits(model, images, batch_size=500):
    """Forward pass without graph recording; returns an N x classes array."""
    x = _as_batch(model, images)
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model(x[i:i + batch_size]).data)
    if not outs:
        return np.zeros((0, model.spec.num_classes), dtype=model.dtype)
    return np.concatenate(outs)


def predict_features(model, images, batch_size=500):
    """Pooled pre-classifier features (N x 128) without graph recording."""
    x = _as_batch(model, images)
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model.features(x[i:i + batch_size]).data)
    if not outs:
        return np.zeros((0, model.features(x[:1]).shape[1]), dtype=model.dtype)
    return np.concatenate(outs)


def accuracy_from_logits(logits, labels, num_classes=None):
    """Argmax accuracy (ties go to the lowest class) and per-class counts."""
    labels = np.asarray(labels)
    if len(logits) != len(labels):
        raise ShapeError(f"{len(logits)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot evaluate on empty data")
    k = num_classes or logits.shape[1]
    pred = np.argmax(logits, axis=1)
    hit = pred == labels
    correct = np.bincount(labels[hit], minlength=k)
    total = np.bincount(labels, minlength=k)
    return float(hit.mean()), correct, total


def evaluate(model, images, labels, batch_size=500):
    """``(accuracy, per_class_correct, per_class_total)`` of ``model`` on the data."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on empty data")
    logits = predict_logits(model, images, batch_size)
    return accuracy_from_logits(logits, labels, model.spec.num_classes)


def evaluate_shards(model, shards, batch_size=500, workers=None):
    """Evaluate several ``(images, labels)`` shards, in parallel when allowed.

    The model is only read, so shards share it. Results keep shard order.
    """
    workers = worker_count(workers)
    if workers <= 1 or len(shards) <= 1:
        return [evaluate(model, x, y, batch_size) for x, y in shards]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: evaluate(model, s[0], s[1], batch_size), shards))


def train(model, train_data, valid_data=None, config=None, checkpoint_path=None,
          callback=None):
    """Train ``model`` in place.

    ``train_data``/``valid_data`` are ``(images, labels)`` pairs. The
    best-validation weights are kept in ``result.best_state`` (and written to
    ``checkpoint_path`` if given); without validation data the last epoch
    counts as best.
    """
    config = config or TrainConfig()
    x_train, y_train = train_data
    x_train = _as_batch(model, x_train)
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(y_train) == 0:
        raise TrainingError("training data is empty")
    if len(x_train) != len(y_train):
        raise TrainingError(f"{len(x_train)} training images but {len(y_train)} labels")
    has_valid = valid_data is not None and len(valid_data[1]) > 0

    params = [p for _, p in model.parameters()]
    opt = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    n = len(y_train)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum, hits = 0.0, 0
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            logits = model(Tensor(x_train[idx]))
            loss = softmax_cross_entropy(logits, y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step(lr)
            loss_sum += value * len(idx)
            hits += int((logits.data.argmax(axis=1) == y_train[idx]).sum())
        valid_acc = evaluate(model, *valid_data)[0] if has_valid else float("nan")
        rec = EpochRecord(epoch, lr, loss_sum / n, valid_acc, hits / n,
                          time.perf_counter() - start)
        result.history.append(rec)
        log.info("epoch %d lr=%.3g loss=%.4f train_acc=%.4f valid_acc=%.4f (%.1fs)",
                 epoch, lr, rec.train_loss, rec.train_accuracy, valid_acc, rec.seconds)
        improved = has_valid and (result.best_epoch < 0
                                  or valid_acc > result.best_valid_accuracy)
        if improved or not has_valid:
            result.best_epoch = epoch
            result.best_valid_accuracy = valid_acc
            result.best_state = model.state_dict()
            if checkpoint_path is not None:
                model.save(checkpoint_path, epoch=epoch, valid_accuracy=valid_acc,
                           train_config=asdict(config))
        if callback is not None:
            callback(rec)
    result.final_state = model.state_dict()
    return result
