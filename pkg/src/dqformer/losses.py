"""Mask and identifier losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import PredictionOutput, resample_mask_to_grid

PROB_CLAMP = 1e-6


@dataclass
class LossWeights:
    dice: float = 1.0
    focal: float = 2.0
    ce: float = 1.0
    intermediate: float = 0.4
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        if min(self.dice, self.focal, self.ce, self.intermediate, self.focal_gamma) < 0:
            raise ValueError("loss weights and focal gamma must be non-negative")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.dice_eps < 0:
            raise ValueError("dice eps must be non-negative")


def _pair(probs, target) -> tuple[torch.Tensor, torch.Tensor]:
    probs = torch.as_tensor(probs)
    target = torch.as_tensor(target, dtype=probs.dtype, device=probs.device)
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    return probs, target


def dice_loss(probs, target, eps: float = 1.0, batched: bool = False) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps).

    With ``batched`` the leading axis indexes samples: the loss is computed
    per sample and averaged.
    """
    probs, target = _pair(probs, target)
    if batched:
        probs, target = probs.flatten(1), target.flatten(1)
        dims = 1
    else:
        probs, target = probs.flatten(), target.flatten()
        dims = 0
    inter = (probs * target).sum(dims)
    loss = 1.0 - (2.0 * inter + eps) / (probs.sum(dims) + target.sum(dims) + eps)
    return loss.mean() if batched else loss


def focal_loss(probs, target, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Mean focal loss. Soft targets mix the positive and negative terms linearly."""
    probs, target = _pair(probs, target)
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = -alpha * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * p**gamma * torch.log(1.0 - p)
    return (target * pos + (1.0 - target) * neg).mean()


def identifier_loss(logits, label) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    if logits.ndim == 1:
        logits, label = logits[None], label.reshape(1)
    return F.cross_entropy(logits, label)


def total_loss(
    pred: PredictionOutput, gt_masks: torch.Tensor, labels: torch.Tensor, weights: LossWeights | None = None
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the mask, intermediate and identifier terms.

    ``gt_masks`` is (B, H, W) in {0, 1}; no-anomaly samples carry all-zero masks
    and are supervised against them like any other sample.
    """
    w = weights or LossWeights()
    dtype = pred.mask_logits.dtype
    gt = torch.as_tensor(gt_masks).to(dtype=dtype, device=pred.mask_logits.device)
    probs = torch.sigmoid(pred.mask_logits)
    terms: dict[str, torch.Tensor] = {
        "dice": w.dice * dice_loss(probs, gt, w.dice_eps, batched=True),
        "focal": w.focal * focal_loss(probs, gt, w.focal_gamma, w.focal_alpha),
    }
    for k, soft in enumerate(pred.intermediate_soft_masks):
        target = resample_mask_to_grid(gt, soft.shape[-2], soft.shape[-1])
        terms[f"dice_{k + 1}"] = w.intermediate * w.dice * dice_loss(soft, target, w.dice_eps, batched=True)
        terms[f"focal_{k + 1}"] = w.intermediate * w.focal * focal_loss(soft, target, w.focal_gamma, w.focal_alpha)
    terms["ce"] = w.ce * identifier_loss(pred.no_anomaly_logits, labels)
    total = sum(terms.values())
    return total, terms
