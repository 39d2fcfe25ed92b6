"""Training losses: mask bce/dice, classification with no-object
handling, the hard first-round loss, the soft second-round loss with
detached soft targets, and their hierarchical combination.

Mask losses average over positions and sum over matched instances; the
classification term averages over all queries with unmatched (no-object)
terms down-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import MatchResult
from .errors import ContractError, ShapeError
from .predictions import GroundTruth, PredictionSet
from .tensor import Tensor

EPS_PROB = 1e-7      # bce probability clamp
EPS_LOG = 1e-12      # classification log floor
DICE_SMOOTH = 1.0

__all__ = [
    "LossWeights",
    "bce_mask_loss",
    "dice_loss",
    "classification_loss",
    "soft_mask",
    "hard_loss",
    "soft_loss",
    "loss_terms",
    "hierarchical_loss",
    "baseline_loss",
]


@dataclass
class LossWeights:
    lambda_ce_r1: float = 2.5
    lambda_dice_r1: float = 2.5
    lambda_ce_r2: float = 0.25
    lambda_dice_r2: float = 0.25
    alpha: float = 0.5
    no_object_weight: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


def _as_target(target) -> Tensor:
    return target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))


def bce_mask_loss(pred_probs: Tensor, target) -> Tensor:
    """Mean binary cross entropy with predictions clamped to [eps, 1-eps]."""
    target = _as_target(target)
    if pred_probs.shape != target.shape:
        raise ShapeError("bce operands must share a shape")
    p = pred_probs.clip(EPS_PROB, 1.0 - EPS_PROB)
    t = target.detach()
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def dice_loss(pred_probs: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    target = _as_target(target)
    if pred_probs.shape != target.shape:
        raise ShapeError("dice operands must share a shape")
    t = target.detach()
    inter = (pred_probs * t).sum()
    denom = pred_probs.sum() + t.sum() + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def soft_mask(pred_probs: Tensor, gt_mask) -> Tensor:
    """Hadamard product of prediction and ground truth, returned as a
    constant target so no gradient reaches the prediction factor."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    if pred_probs.shape != gt.shape:
        raise ShapeError("soft_mask operands must share a shape")
    return Tensor(pred_probs.data * gt)


def _class_targets(match: MatchResult, gt_labels: np.ndarray, num_classes: int,
                   no_object_weight: float) -> np.ndarray:
    """Per-query weight matrix selecting -log p(target) terms."""
    n = match.num_queries
    weights = np.zeros((n, num_classes + 1))
    weights[:, num_classes] = no_object_weight
    for sigma in (match.sigma1, match.sigma2):
        for gt, q in sigma.items():
            label = int(gt_labels[gt])
            if not 1 <= label <= num_classes:
                raise ContractError(f"label {label} outside 1..{num_classes}")
            weights[q, :] = 0.0
            weights[q, label - 1] = 1.0
    return weights


def classification_loss(class_probs: Tensor, match: MatchResult, gt_labels,
                        no_object_weight: float) -> Tensor:
    """Mean over all queries of -log p(target); targets are the matched
    ground-truth classes for both rounds and no-object otherwise, the
    latter scaled by `no_object_weight`."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    n, k_plus_1 = class_probs.shape
    if n != match.num_queries:
        raise ShapeError("class rows disagree with the match")
    row_sums = class_probs.data.sum(axis=1)
    if np.abs(row_sums - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError("class rows must lie on the simplex")
    weights = _class_targets(match, gt_labels, k_plus_1 - 1, no_object_weight)
    log_p = class_probs.clip(EPS_LOG, 1.0).log()
    return -(log_p * Tensor(weights)).sum() / n


def _mask_pair_loss(preds: PredictionSet, gts: GroundTruth, sigma: dict,
                    lam_ce: float, lam_dice: float, soft_targets: bool) -> Tensor:
    total = Tensor(0.0)
    for gt, q in sorted(sigma.items()):
        if not 0 <= q < preds.num_queries or not 0 <= gt < gts.count:
            raise ContractError("match index out of range")
        pred = preds.mask_probs.take_rows([q]).reshape(gts.masks.shape[1:])
        target = soft_mask(pred, gts.masks[gt]) if soft_targets else gts.masks[gt]
        total = total + lam_ce * bce_mask_loss(pred, target) \
            + lam_dice * dice_loss(pred, target)
    return total


def hard_loss(preds: PredictionSet, gts: GroundTruth, sigma1: dict,
              weights: LossWeights) -> Tensor:
    """First-round mask term: sum over matched pairs of the weighted
    bce + dice against the true masks (classification handled separately)."""
    return _mask_pair_loss(preds, gts, sigma1,
                           weights.lambda_ce_r1, weights.lambda_dice_r1,
                           soft_targets=False)


def soft_loss(preds: PredictionSet, gts: GroundTruth, sigma2: dict,
              weights: LossWeights) -> Tensor:
    """Second-round mask term against detached soft targets."""
    return _mask_pair_loss(preds, gts, sigma2,
                           weights.lambda_ce_r2, weights.lambda_dice_r2,
                           soft_targets=True)


def loss_terms(preds: PredictionSet, gts: GroundTruth, match: MatchResult,
               weights: LossWeights, variant: str = "hierarchical") -> dict:
    """All loss terms for one clip; `total` is the trainable scalar.

    variant "hierarchical": hard + alpha * soft + classification.
    variant "original": both rounds take the hard-style loss with
    first-round weights against true masks (the one-round baseline is
    this variant with an empty second round).
    """
    if variant not in ("hierarchical", "original"):
        raise ContractError(f"unknown loss variant {variant!r}")
    hard = hard_loss(preds, gts, match.sigma1, weights)
    cls = classification_loss(preds.class_probs, match, gts.labels,
                              weights.no_object_weight)
    if variant == "hierarchical":
        soft = soft_loss(preds, gts, match.sigma2, weights)
        total = hard + weights.alpha * soft + cls
    else:
        soft = _mask_pair_loss(preds, gts, match.sigma2,
                               weights.lambda_ce_r1, weights.lambda_dice_r1,
                               soft_targets=False)
        total = hard + soft + cls
    return {"hard": hard, "soft": soft, "cls": cls, "total": total}


def hierarchical_loss(preds: PredictionSet, gts: GroundTruth, match: MatchResult,
                      weights: LossWeights, variant: str = "hierarchical") -> Tensor:
    return loss_terms(preds, gts, match, weights, variant)["total"]


def baseline_loss(preds: PredictionSet, gts: GroundTruth, sigma1: dict,
                  weights: LossWeights) -> float:
    """Independent transcription of the one-round set-prediction loss,
    written directly in numpy as a cross-check for the trainable path."""
    mask_probs = preds.mask_probs.data
    class_probs = preds.class_probs.data
    n, k_plus_1 = class_probs.shape

    mask_term = 0.0
    for gt, q in sorted(sigma1.items()):
        p = np.clip(mask_probs[q], EPS_PROB, 1.0 - EPS_PROB)
        t = gts.masks[gt]
        bce = np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
        inter = float((mask_probs[q] * t).sum())
        denom = float(mask_probs[q].sum() + t.sum()) + DICE_SMOOTH
        dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom
        mask_term += weights.lambda_ce_r1 * bce + weights.lambda_dice_r1 * dice

    matched = {q: int(gts.labels[gt]) for gt, q in sigma1.items()}
    cls_term = 0.0
    for q in range(n):
        if q in matched:
            cls_term += -np.log(np.clip(class_probs[q, matched[q] - 1], EPS_LOG, 1.0))
        else:
            cls_term += -weights.no_object_weight * np.log(
                np.clip(class_probs[q, k_plus_1 - 1], EPS_LOG, 1.0))
    return float(mask_term + cls_term / n)
