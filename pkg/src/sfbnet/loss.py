"""Segmentation losses with deep supervision, and the Dice metric.

Each supervised stage combines soft Dice (foreground classes only) with
pixel cross-entropy, weighted 1:1; stage weights halve as resolution
halves.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .engine import Tensor, ops
from .errors import DataError, DimensionError

DICE_EPS = 1e-5


@dataclasses.dataclass(frozen=True)
class SupervisionWeights:
    """Stage weights (full, half, quarter); each is half the previous."""

    first: float = 1.0

    @property
    def values(self) -> tuple:
        return (self.first, self.first / 2.0, self.first / 4.0)


def _check_labels(labels: np.ndarray, classes: int, spatial) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape[-2:] != tuple(spatial):
        raise DimensionError(
            f"labels have spatial shape {labels.shape[-2:]}, logits expect {tuple(spatial)}"
        )
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def soft_dice_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """1 - mean soft Dice over foreground classes.

    Probabilities come from a softmax over the class axis; overlaps are
    aggregated over the whole batch. A small epsilon guards empty classes.
    """
    n, c, h, w = logits.shape
    labels = _check_labels(labels, c, (h, w))
    if labels.ndim == 2:
        labels = labels[None]
    tok = ops.transpose(ops.reshape(logits, (n, c, h * w)), (0, 2, 1))
    probs = ops.softmax_lastdim(tok)  # (n, hw, c)
    target = ops.one_hot(labels.reshape(n, h * w), c, dtype=logits.dtype)
    inter = ops.sum_(ops.mul(probs, target), axis=(0, 1))  # per class
    pred_sum = ops.sum_(probs, axis=(0, 1))
    true_sum = ops.sum_(target, axis=(0, 1))
    dice = ops.div(
        ops.add(ops.mul(inter, 2.0), DICE_EPS),
        ops.add(ops.add(pred_sum, true_sum), DICE_EPS),
    )
    fg = ops.take_rows(ops.reshape(dice, (c, 1)), np.arange(1, c))
    return ops.sub(1.0, ops.mean(fg))


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax probability of the true class."""
    n, c, h, w = logits.shape
    labels = _check_labels(labels, c, (h, w))
    if labels.ndim == 2:
        labels = labels[None]
    tok = ops.transpose(ops.reshape(logits, (n, c, h * w)), (0, 2, 1))
    logp = ops.log_softmax_lastdim(tok)
    target = ops.one_hot(labels.reshape(n, h * w), c, dtype=logits.dtype)
    picked = ops.sum_(ops.mul(logp, target), axis=-1)
    return ops.neg(ops.mean(picked))


def stage_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return ops.add(soft_dice_loss(logits, labels), cross_entropy_loss(logits, labels))


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label shrink, keeping the top-left sample per block."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(
            f"label map {h}x{w} not divisible by downsampling factor {factor}"
        )
    return labels[..., ::factor, ::factor]


@dataclasses.dataclass
class LabelPyramid:
    """Integer label maps at full, half and quarter resolution."""

    full: np.ndarray
    half: np.ndarray
    quarter: np.ndarray

    @classmethod
    def build(cls, labels: np.ndarray) -> "LabelPyramid":
        return cls(
            full=np.asarray(labels),
            half=downsample_labels(labels, 2),
            quarter=downsample_labels(labels, 4),
        )

    @property
    def stages(self) -> tuple:
        return (self.full, self.half, self.quarter)


def deep_supervision_loss(outputs, pyramid: LabelPyramid,
                          weights: SupervisionWeights = SupervisionWeights()) -> Tensor:
    """Weighted sum of per-stage (dice + cross-entropy) losses."""
    if len(outputs) != 3:
        raise DimensionError(f"expected 3 output stages, got {len(outputs)}")
    total = None
    for logits, labels, alpha in zip(outputs, pyramid.stages, weights.values):
        term = ops.mul(stage_loss(logits, labels), alpha)
        total = term if total is None else ops.add(total, term)
    return total


def dice_score(pred_labels: np.ndarray, true_labels: np.ndarray, cls: int) -> float:
    """2|P∩G| / (|P|+|G|) for one class; 1.0 when both masks are empty."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise DimensionError(
            f"mask shapes differ: {pred_labels.shape} vs {true_labels.shape}"
        )
    p = pred_labels == cls
    g = true_labels == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def mean_foreground_dice(pred_labels: np.ndarray, true_labels: np.ndarray,
                         classes: int) -> float:
    scores = [dice_score(pred_labels, true_labels, c) for c in range(1, classes)]
    return float(np.mean(scores))
