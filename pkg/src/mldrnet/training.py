"""Mini-batch SGD training loop with deterministic shuffling and resumable checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .data import crops
from .layers import softmax_cross_entropy
from .metrics import evaluate
from .optim import SGD, lr_schedule

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_policy: str = "constant"
    lr_factor: float = 0.1
    lr_every: int = 10
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        SGD(self.lr, self.momentum, self.weight_decay)
        lr_schedule(0, self.lr, self.lr_policy, self.lr_factor, self.lr_every)
        return self


@dataclass
class History:
    epochs: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.epochs[-1]["train_loss"] if self.epochs else None


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation for one epoch, derived from (seed, epoch) alone."""
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(count)


def _training_view(images, size, seed, epoch, batch_index):
    # one of the five crops per image when stored images exceed the model input
    if images.shape[-1] == size:
        return images
    views = crops(images, size)
    pick = np.random.Generator(np.random.PCG64([seed, epoch, batch_index, 1])).integers(5, size=len(images))
    return np.stack([views[p][i] for i, p in enumerate(pick)])


def train_epoch(model, dataset, sgd: SGD, cfg: TrainConfig, epoch: int):
    """One pass of shuffled mini-batch SGD; the last partial batch is kept."""
    sgd.lr = lr_schedule(epoch, cfg.lr, cfg.lr_policy, cfg.lr_factor, cfg.lr_every)
    order = epoch_order(len(dataset), cfg.seed, epoch)
    images_all, labels_all = dataset.images(), dataset.labels()
    size = model.config.input_size
    model.train()
    total_loss, correct = 0.0, 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        images = _training_view(images_all[idx], size, cfg.seed, epoch, b)
        labels = labels_all[idx]
        model.zero_grad()
        _, logits = model.forward(images)
        out = softmax_cross_entropy(logits, labels)
        if not math.isfinite(out.loss):
            raise NonFiniteLossError(f"non-finite loss {out.loss} at epoch {epoch}, batch {b}")
        model.backward(out.grad_logits)
        sgd.step(model.named_parameters())
        total_loss += out.loss * len(idx)
        correct += int((out.probs.argmax(axis=1) == labels).sum())
    return total_loss / len(order), correct / len(order)


def dataset_loss(model, dataset, batch_size=64) -> float:
    model.eval()
    size = model.config.input_size
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images = crops(dataset.images(idx), size)[0]
        total += softmax_cross_entropy(model.forward(images)[1], dataset.labels(idx)).loss * len(idx)
    return total / len(dataset)


def fit(model, train_set, cfg: TrainConfig, val_set=None, sgd: SGD | None = None, start_epoch=0,
        history: History | None = None, checkpoint_path=None, stop_after=None) -> History:
    """Train ``model`` in place from ``start_epoch`` to ``cfg.epochs``.

    ``stop_after`` ends the run early after that many epochs (used to simulate an
    interrupted run); with ``checkpoint_path`` a checkpoint is written after every
    epoch so training can resume from it with an identical trajectory.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.n_classes != model.config.n_classes:
        raise ValueError(f"model has {model.config.n_classes} classes, data has {train_set.n_classes}")
    sgd = sgd or SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = history or History()
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end):
        loss, acc = train_epoch(model, train_set, sgd, cfg, epoch)
        row = {"epoch": epoch + 1, "train_loss": loss, "train_acc": acc}
        if val_set is not None and len(val_set):
            row["val_loss"] = dataset_loss(model, val_set)
            row["val_acc"] = evaluate(model, val_set)[0]
        history.epochs.append(row)
        log.info("epoch %d  loss %.5f  acc %.4f%s", epoch + 1, loss, acc,
                 f"  val_acc {row['val_acc']:.4f}" if "val_acc" in row else "")
        if checkpoint_path is not None:
            model_mod.save(model, checkpoint_path, velocity=sgd.velocity, epoch=epoch + 1,
                           meta={"history": history.epochs})
    return history


def resume(checkpoint_path, train_set, cfg: TrainConfig, val_set=None, **kwargs):
    """Continue a run from a checkpoint written by ``fit``; returns (model, history)."""
    ckpt = model_mod.load(checkpoint_path)
    sgd = SGD(cfg.lr, cfg.momentum, cfg.weight_decay, velocity=ckpt.velocity)
    history = History(list(ckpt.meta.get("history", [])))
    fit(ckpt.model, train_set, cfg, val_set, sgd=sgd, start_epoch=ckpt.epoch, history=history,
        checkpoint_path=checkpoint_path, **kwargs)
    return ckpt.model, history
