"""Segmentation losses: smoothed Dice plus pixel-mean binary cross-entropy.

The training objective is their unweighted sum.  Both accept torch tensors
(any floating dtype) and are differentiable in the prediction.
"""

from __future__ import annotations

import torch

from .errors import ValidationError

DICE_EPS = 1.0


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps); in [0, 1)."""
    _check_shapes(probabilities, target)
    if eps <= 0:
        raise ValidationError(f"dice smoothing eps must be > 0, got {eps}")
    t = target.to(probabilities.dtype)
    intersection = (probabilities * t).sum()
    return 1.0 - (2.0 * intersection + eps) / (probabilities.sum() + t.sum() + eps)


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy from logits, stable for large magnitudes."""
    _check_shapes(logits, target)
    t = target.to(logits.dtype)
    # max(x, 0) - x*t + log(1 + exp(-|x|)): never exponentiates a large positive
    return (logits.clamp(min=0) - logits * t + torch.log1p(torch.exp(-logits.abs()))).mean()


def total_loss(
    logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Unweighted sum: returns (dice + ce, dice, ce) with total computed as
    exactly that tensor addition."""
    dice = dice_loss(torch.sigmoid(logits), target, eps)
    ce = ce_loss(logits, target)
    return dice + ce, dice, ce
