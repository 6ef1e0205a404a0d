"""Segmentation losses (soft Dice, cross-entropy, DiceCE) and the Dice similarity metric."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, ops

DICE_SMOOTH = 1e-5


def _check_pair(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.shape[1:] != labels.shape:
        raise ops.ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree spatially")
    return labels


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """``[D, H, W]`` integer labels -> ``[C, D, H, W]`` indicator volume."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(dtype)


def soft_dice_per_class(probs: Tensor, target: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(g p) + s) / (sum g + sum p + s)`` for every class, shape ``[C]``.

    The smoothing term appears in numerator and denominator so a class absent
    from both prediction and target scores 0 loss.
    """
    c = probs.shape[0]
    p = ops.reshape(probs, (c, -1))
    g = target.reshape(c, -1).astype(probs.dtype)
    inter = ops.sum(ops.mul(p, g), axis=1)
    denom = ops.add(ops.sum(p, axis=1), g.sum(axis=1) + smooth)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), denom))


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice on class-softmax probabilities, averaged over foreground classes."""
    labels = _check_pair(logits, labels)
    c = logits.shape[0]
    probs = ops.softmax(logits, axis=0)
    per_class = soft_dice_per_class(probs, one_hot(labels, c), smooth)
    weights = np.full(c, 1.0 / (c - 1), dtype=logits.dtype)
    weights[0] = 0.0  # background excluded
    return ops.sum(ops.mul(per_class, weights))


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of ``-log softmax(logits)[true class]``."""
    labels = _check_pair(logits, labels)
    c = logits.shape[0]
    logp = ops.log_softmax(logits, axis=0)
    picked = ops.mul(logp, one_hot(labels, c, logits.dtype))
    return ops.mul(ops.sum(picked), -1.0 / labels.size)


def dice_ce(logits: Tensor, labels: np.ndarray, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return ops.add(ops.mul(dice_loss(logits, labels), alpha), ops.mul(ce_loss(logits, labels), beta))


def dsc(gt_mask: np.ndarray, pred_mask: np.ndarray) -> float:
    """Dice similarity ``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    gt = np.asarray(gt_mask, dtype=bool)
    pred = np.asarray(pred_mask, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    total = int(gt.sum()) + int(pred.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(gt, pred).sum()) / total


def per_class_dsc(labels: np.ndarray, prediction: np.ndarray, num_classes: int) -> list[float]:
    """DSC for each foreground class (1..C-1) of two integer label maps."""
    return [dsc(labels == c, prediction == c) for c in range(1, num_classes)]
