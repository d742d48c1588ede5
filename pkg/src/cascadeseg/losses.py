"""Segmentation losses for heavily imbalanced foreground classes.

Class weights come from a softmax over inverse-frequency ratios, which
smooths the huge background/foreground count gap into a usable weighting.
The training objective is an unweighted sum of soft Dice (computed on
probabilities against one-hot targets, epsilon only in the denominator)
and weighted cross-entropy.

Hand-worked reference examples (kept in sync with the test suite):

  1. class_weights((900, 100)): ratios are (1000/900, 1000/100), and
     the softmax of (1.1111..., 10.0) gives (0.000138, 0.999862).

  2. soft Dice, single class, targets L = (1, 0, 1, 0) against
     probabilities P = (0.9, 0.1, 0.6, 0.2), eps 1e-5:
     1 - 2*1.5 / (2 + 1.8 + 1e-5) = 1 - 3.0/3.80001 = 0.210528.

  3. weighted cross-entropy, one voxel with true class 0,
     p = (0.8, 0.2), weights (0.5, 1.5): 0.5 * (-ln 0.8) = 0.111572.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import one_hot, softmax_channels
from .tensor import Tensor

DICE_EPS = 1e-5
PROB_FLOOR = 1e-12


def class_weights(counts) -> np.ndarray:
    """softmax over (total / count_i); rare classes get weight near 1."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError(f"class_weights: counts must be a 1-d vector, got shape {c.shape}")
    if np.any(c <= 0):
        raise ValueError("class_weights: every class count must be positive")
    ratios = c.sum() / c
    shifted = ratios - ratios.max()
    e = np.exp(shifted)
    return e / e.sum()


def soft_dice_loss(probs: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Mean over classes of 1 - 2*sum(L*P) / (sum(L) + sum(P) + eps).

    probs and target are [N,K,D,H,W]; target is one-hot. eps sits in the
    denominator only, so a class absent from both maps still contributes
    a loss of exactly 1.
    """
    if probs.shape != target.shape:
        raise T.ShapeError(f"soft_dice_loss: shapes {probs.shape} vs {target.shape}")
    k = probs.shape[1]
    spatial = (0, 2, 3, 4)
    inter = (probs * target).sum(axes=spatial)          # [K]
    denom = target.sum(axes=spatial) + probs.sum(axes=spatial) + eps
    per_class = 1.0 - (inter * 2.0) / denom
    # mean over classes
    return per_class.sum() * (1.0 / k)


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over voxels of weights[y] * -log(p_y), probabilities floored."""
    lab = np.asarray(labels)
    k = probs.shape[1]
    if lab.shape != probs.shape[:1] + probs.shape[2:]:
        raise T.ShapeError(
            f"weighted_cross_entropy: labels {lab.shape} vs probs {probs.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise T.ShapeError(f"weighted_cross_entropy: {k} classes, weights shape {w.shape}")
    target = Tensor(one_hot(lab, k, dtype=probs.dtype))
    p_true = (probs * target).sum(axes=(1,))            # [N,D,H,W]
    floored = T.maximum_scalar(p_true, PROB_FLOOR)
    wmap = Tensor(w[lab].astype(probs.dtype))
    return (wmap * T.neg(floored.log())).mean()


def combined_loss(logits: Tensor, labels: np.ndarray, weights: np.ndarray,
                  eps: float = DICE_EPS) -> Tensor:
    """soft Dice + weighted cross-entropy at 1:1, on softmaxed logits."""
    probs = softmax_channels(logits)
    k = logits.shape[1]
    target = Tensor(one_hot(np.asarray(labels), k, dtype=logits.dtype))
    return soft_dice_loss(probs, target, eps) + weighted_cross_entropy(probs, labels, weights)
