"""Momentum SGD with a cosine-annealed learning rate, and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ops
from .data import AugmentationPolicy, DatasetSplit, augment

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; the network (or its learning rate) is unusable."""


@dataclass
class TrainConfig:
    epochs: int = 1
    lr_start: float = 0.05
    lr_end: float = 0.0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augmentation: AugmentationPolicy = field(
        default_factory=lambda: AugmentationPolicy(enabled=False))
    track_val: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_start >= self.lr_end >= 0:
            raise ValueError(f"need lr_start >= lr_end >= 0, got {self.lr_start}, {self.lr_end}")


@dataclass
class TrainReport:
    lr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seconds: float = 0.0
    epochs_consumed: int = 0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for i in range(self.epochs_consumed):
            va = self.val_acc[i] if i < len(self.val_acc) else None
            w.writerow([i + 1, f"{self.lr[i]:.8g}", f"{self.train_loss[i]:.8g}",
                        f"{self.train_acc[i]:.6f}", "" if va is None else f"{va:.6f}"])
        return buf.getvalue()


def cosine_lr(t, total, lr_start, lr_end):
    """``lr_end + (lr_start - lr_end) * (1 + cos(pi * t / total)) / 2``."""
    if total <= 0:
        raise ValueError(f"schedule length must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"progress {t} outside [0, {total}]")
    if t == total:
        return float(lr_end)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t / total))


class EpochBudget(NamedTuple):
    total: int    # all epochs spent, every neighbour included
    lineage: int  # epochs experienced by the returned model


def epoch_budget(n_steps, n_neigh, epoch_neigh, epoch_final, epoch_pretrain=0) -> EpochBudget:
    for v in (n_steps, n_neigh, epoch_neigh, epoch_final, epoch_pretrain):
        if v < 0:
            raise ValueError("epoch accounting inputs must be non-negative")
    return EpochBudget(
        total=epoch_pretrain + epoch_neigh * n_neigh * n_steps + epoch_final,
        lineage=epoch_pretrain + epoch_neigh * n_steps + epoch_final,
    )


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    stops = list(range(batch_size, n, batch_size)) + [n]
    start = 0
    for stop in stops:
        # a single-sample batch has no batch-norm variance
        if stop - start >= 2 or n == 1:
            yield order[start:stop]
        start = stop


def sgd_step(graph, grads, velocity, lr, momentum, weight_decay):
    for nid, name, w in graph.parameters():
        g = grads.get((nid, name))
        if g is None:
            continue
        if weight_decay:
            g = g + np.float32(weight_decay) * w
        key = (nid, name)
        v = velocity.get(key)
        if v is None or v.shape != w.shape:
            v = np.zeros_like(w)
        v *= np.float32(momentum)
        v -= np.float32(lr) * g
        velocity[key] = v
        w += v


def train_step(graph, x, y):
    """One forward/backward pass; returns ``(loss, correct, grads)``."""
    outputs, caches = graph.run(x, mode="train", keep_cache=True)
    sm = graph.nodes[graph.output_id]
    logits = outputs[sm.inputs[0]]
    loss, dlogits = ops.softmax_cross_entropy(logits, y)
    grads = graph.backward(caches, dlogits, start=sm.inputs[0])
    correct = int((outputs[graph.output_id].argmax(axis=1) == y).sum())
    return loss, correct, grads


def sgdr_train(graph, train: DatasetSplit, config: TrainConfig, val: DatasetSplit | None = None):
    """Train ``graph`` in place for one cosine cycle of ``config.epochs`` epochs.

    The learning rate is annealed per batch from ``lr_start`` to ``lr_end``;
    every call restarts at ``lr_start``. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if len(train) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    n = len(train)
    per_epoch = sum(1 for _ in _batches(n, config.batch_size, np.random.default_rng(0)))
    total = per_epoch * config.epochs
    velocity = {}
    report = TrainReport()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        lr = config.lr_start
        for idx in _batches(n, config.batch_size, rng):
            x = augment(train.images[idx], config.augmentation, aug_rng)
            y = train.labels[idx]
            lr = cosine_lr(step, total, config.lr_start, config.lr_end)
            loss, ok, grads = train_step(graph, x, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {step}")
            sgd_step(graph, grads, velocity, lr, config.momentum, config.weight_decay)
            loss_sum += loss * len(idx)
            correct += ok
            seen += len(idx)
            step += 1
        report.lr.append(lr)
        report.train_loss.append(loss_sum / seen)
        report.train_acc.append(correct / seen)
        if val is not None and (config.track_val or epoch == config.epochs - 1):
            report.val_acc.append(evaluate(graph, val)[1])
        report.epochs_consumed = epoch + 1
        log.debug("epoch %d lr=%.4g loss=%.4f acc=%.4f", epoch + 1, lr,
                  report.train_loss[-1], report.train_acc[-1])
    report.seconds = time.perf_counter() - t0
    return graph, report


def predict(graph, images, batch_size=256):
    return np.concatenate([graph.forward(images[i:i + batch_size], mode="infer")
                           for i in range(0, len(images), batch_size)])


def evaluate(graph, split: DatasetSplit, batch_size=256):
    """Infer-mode ``(mean cross-entropy, accuracy)``; argmax ties go to the lowest class."""
    if len(split) == 0:
        raise ValueError("empty split")
    probs = predict(graph, split.images, batch_size)
    return ops.cross_entropy(probs, split.labels), float(np.mean(probs.argmax(axis=1) == split.labels))
