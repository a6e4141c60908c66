"""Training objective: balanced BCE + Dice for localization, BCE for detection.

The balanced BCE averages the cross entropy separately over pristine and
tampered pixels so region size does not skew the loss. All predictions are
clamped to [1e-7, 1 - 1e-7] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PreconditionError
from . import tensor as T
from .tensor import Tensor

CLAMP = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    bbce: float = 0.3
    dice: float = 0.45
    det: float = 0.25

    def __post_init__(self):
        if min(self.bbce, self.dice, self.det) < 0:
            raise PreconditionError("loss weights must be non-negative")


def _bce_map(pred: Tensor, target: np.ndarray) -> Tensor:
    p = T.clip(pred, CLAMP, 1.0 - CLAMP)
    t = target
    return -(Tensor(t) * T.log(p) + Tensor(1.0 - t) * T.log(1.0 - p))


def bbce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean of the per-region BCE means (pristine and tampered).

    If one region is empty (fully authentic or fully tampered mask) the
    loss degenerates to the mean over the non-empty region. Accepts a
    single mask (H, W) or a batch (B, H, W); batches average per-sample
    losses.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction {pred.shape} vs target {target.shape}")
    squeeze = target.ndim == 2
    if squeeze:
        target = target[None]
        pred = T.reshape(pred, (1,) + pred.shape)
    b = target.shape[0]
    t = (target > 0.5).astype(pred.dtype).reshape(b, -1)
    n_pos = t.sum(axis=1)
    n_neg = t.shape[1] - n_pos
    if np.any((n_pos == 0) & (n_neg == 0)):
        raise PreconditionError("target mask has zero pixels")
    # Per-pixel weights implementing the two region means; a missing region
    # shifts full weight to the other one.
    w_pos = np.where(n_pos > 0, np.where(n_neg > 0, 0.5, 1.0) / np.maximum(n_pos, 1), 0.0)
    w_neg = np.where(n_neg > 0, np.where(n_pos > 0, 0.5, 1.0) / np.maximum(n_neg, 1), 0.0)
    weights = t * w_pos[:, None] + (1.0 - t) * w_neg[:, None]
    bce = _bce_map(T.reshape(pred, (b, -1)), t)
    per_sample = T.tensor_sum(bce * Tensor(weights.astype(np.float64 if
                              pred.dtype == np.float64 else np.float32)), axis=1)
    return T.tensor_mean(per_sample)


def dice_loss(pred: Tensor, target: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 * intersection + eps) / (sum + eps), per sample, batch-averaged."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction {pred.shape} vs target {target.shape}")
    squeeze = target.ndim == 2
    if squeeze:
        target = target[None]
        pred = T.reshape(pred, (1,) + pred.shape)
    b = target.shape[0]
    t = (target > 0.5).astype(pred.dtype).reshape(b, -1)
    p = T.reshape(pred, (b, -1))
    inter = T.tensor_sum(p * Tensor(t), axis=1)
    denom = T.tensor_sum(p, axis=1) + Tensor(t.sum(axis=1).astype(p.dtype))
    score = (inter * 2.0 + smooth) / (denom + smooth)
    return T.tensor_mean(1.0 - score)


def detection_loss(score: Tensor, label: np.ndarray | float) -> Tensor:
    """Plain BCE between the detection score(s) and binary label(s)."""
    label = np.atleast_1d(np.asarray(label, dtype=float))
    if score.size != label.size:
        raise DimensionError(f"score {score.shape} vs label {label.shape}")
    return T.tensor_mean(_bce_map(T.reshape(score, (-1,)), label))


def total_loss(loc_pred: Tensor, det_pred: Tensor, loc_target: np.ndarray,
               det_target: np.ndarray | float,
               weights: LossWeights = LossWeights()
               ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three components, plus their values for logging."""
    l_bbce = bbce_loss(loc_pred, loc_target)
    l_dice = dice_loss(loc_pred, loc_target)
    l_det = detection_loss(det_pred, det_target)
    total = l_bbce * weights.bbce + l_dice * weights.dice + l_det * weights.det
    parts = {"bbce": l_bbce.item(), "dice": l_dice.item(), "det": l_det.item()}
    return total, parts
