"""Training objective: cross-entropy plus smoothed Dice, with an optional
mean-squared error on the horizontal/vertical distance maps."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LOG_FLOOR = math.log(1e-12)


def _channel_axis(logits: Tensor) -> int:
    if logits.ndim == 3:
        return 0
    if logits.ndim == 4:
        return 1
    raise DimensionError(f"logits must be [C, H, W] or [B, C, H, W], got {logits.shape}")


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = np.argwhere((labels < 0) | (labels >= num_classes))
    if len(bad):
        raise ContractError(f"label {labels[tuple(bad[0])]} at pixel {tuple(int(i) for i in bad[0])} "
                            f"outside 0..{num_classes - 1}")


def _onehot(labels: np.ndarray, num_classes: int, axis: int) -> np.ndarray:
    oh = (labels[..., None] == np.arange(num_classes)).astype(np.float64)
    return np.moveaxis(oh, -1, axis)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the softmax over the class axis."""
    logits = T.as_tensor(logits)
    ax = _channel_axis(logits)
    labels = np.asarray(labels)
    spatial = logits.shape[:ax] + logits.shape[ax + 1:]
    if labels.shape != spatial:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    C = logits.shape[ax]
    _check_labels(labels, C)
    logp = T.clamp_min(T.log_softmax(logits, axis=ax), LOG_FLOOR)
    picked = (logp * _onehot(labels, C, ax)).sum(axis=ax)
    return -picked.mean()


def dice_loss(pred_prob: Tensor, gt) -> Tensor:
    """``1 - (2*sum(y*p) + 1) / (sum(y) + sum(p) + 1)``."""
    p = T.as_tensor(pred_prob)
    y = np.asarray(gt, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"dice prediction {p.shape} vs ground truth {y.shape}")
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + 1.0) / (y.sum() + p.sum() + 1.0)


def segmentation_dice(logits: Tensor, labels) -> Tensor:
    """Dice loss on softmax probabilities, averaged over the foreground classes."""
    logits = T.as_tensor(logits)
    ax = _channel_axis(logits)
    C = logits.shape[ax]
    labels = np.asarray(labels)
    prob = T.softmax(logits, axis=ax)
    if C == 1:
        raise ContractError("segmentation needs at least two classes")
    terms = []
    for c in range(1, C):
        idx = [slice(None)] * prob.ndim
        idx[ax] = c
        terms.append(dice_loss(prob[tuple(idx)], labels == c))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def combined_loss(logits: Tensor, labels, hv_pred: Tensor | None = None, hv_gt=None) -> Tensor:
    """Cross-entropy + Dice, plus mean-squared HV error when both HV maps are given."""
    if (hv_pred is None) != (hv_gt is None):
        raise ContractError("hv_pred and hv_gt must be given together")
    loss = ce_loss(logits, labels) + segmentation_dice(logits, labels)
    if hv_pred is not None:
        hv_pred = T.as_tensor(hv_pred)
        target = np.asarray(hv_gt, dtype=np.float64)
        if target.shape != hv_pred.shape:
            raise DimensionError(f"hv prediction {hv_pred.shape} vs target {target.shape}")
        diff = hv_pred - target
        loss = loss + (diff * diff).mean()
    return loss
