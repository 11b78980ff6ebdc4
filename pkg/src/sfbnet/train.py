"""Optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .loss import LabelPyramid, SupervisionWeights, deep_supervision_loss, mean_foreground_dice
from .model import SFBNet, save_checkpoint
from .pipeline import augment, predict_probs


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from base_lr to min_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    t = min(step, total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))


@dataclasses.dataclass
class TrainSettings:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    iters_per_epoch: int = 250
    batch_size: int = 2
    augment: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.iters_per_epoch < 1:
            raise ConfigError(f"iters_per_epoch must be >= 1, got {self.iters_per_epoch}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")


def _make_batch(samples, indices, settings, seed: int):
    images, labels = [], []
    for j, idx in enumerate(indices):
        s = samples[idx]
        if settings.augment:
            s = augment(s, seed + 7919 * j)
        images.append(s.image)
        labels.append(s.labels)
    return np.stack(images), np.stack(labels)


def evaluate_train_dice(model: SFBNet, samples, batch_size: int = 4) -> float:
    """Mean foreground Dice of argmax predictions over the given samples."""
    classes = model.config.classes
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        probs = predict_probs(model, images, training=True)
        preds = probs.argmax(axis=1)
        for s, pred in zip(chunk, preds):
            scores.append(mean_foreground_dice(pred, s.labels, classes))
    return float(np.mean(scores))


def train(model: SFBNet, samples, settings: TrainSettings, seed: int,
          out_dir=None, log_every_epoch: bool = True, callback=None) -> list:
    """Train in place; returns the per-epoch metric records.

    Every iteration samples a batch uniformly with replacement. A NaN or
    infinite loss aborts immediately.
    """
    settings.validate()
    rng = np.random.default_rng(seed)
    optimizer = AdamW(model.parameters(), lr=settings.learning_rate,
                      weight_decay=settings.weight_decay)
    total_steps = settings.epochs * settings.iters_per_epoch
    weights = SupervisionWeights()
    history = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    try:
        step = 0
        for epoch in range(settings.epochs):
            epoch_losses = []
            for _ in range(settings.iters_per_epoch):
                optimizer.lr = cosine_lr(settings.learning_rate, step, total_steps)
                indices = rng.integers(0, len(samples), size=settings.batch_size)
                images, labels = _make_batch(samples, indices, settings,
                                             seed=seed * 1000003 + step)
                outputs = model.forward(images, training=True)
                pyramid = LabelPyramid.build(labels)
                loss = deep_supervision_loss(outputs, pyramid, weights)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss ({value}) at step {step}; aborting"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(value)
                step += 1
                if callback is not None:
                    callback(step, value)
            record = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)),
                "lr": optimizer.lr,
            }
            if log_every_epoch:
                record["dice"] = evaluate_train_dice(model, samples)
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
        if out_dir is not None:
            save_checkpoint(model, out_dir / "model.sfbn")
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
