from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from app.runtime import ShapeError
from app.volume import corner_downsample

EPSILON = 1e-5
PROB_FLOOR = 1e-7
FOREGROUND = [1, 2, 3]
"""Class indices of labels 1, 2 and 4"""


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    ce: float = 1.0
    mp: float = 0.5


@dataclass
class LossBreakdown:
    total: Tensor
    dice: Tensor
    ce: Tensor
    mp: Tensor

    def as_floats(self):
        return {
            "loss_total": self.total.item(),
            "loss_dice": self.dice.item(),
            "loss_ce": self.ce.item(),
            "loss_mp": self.mp.item(),
        }


def class_indices(target: Tensor) -> Tensor:
    """Labels {0, 1, 2, 4} to class indices {0, 1, 2, 3}"""
    return torch.where(target == 4, 3, target).long()


def one_hot(target: Tensor, num_classes: int, dtype: torch.dtype):
    return F.one_hot(class_indices(target), num_classes).movedim(-1, 1).to(dtype)


def check_shapes(probs: Tensor, target: Tensor):
    if probs.ndim != target.ndim + 1 or probs.shape[:1] + probs.shape[2:] != target.shape:
        raise ShapeError(f"Probabilities {tuple(probs.shape)} don't match labels {tuple(target.shape)}")


def dice_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Soft Dice over the three foreground classes, per sample, averaged"""
    check_shapes(probs, target)
    t = one_hot(target, probs.shape[1], probs.dtype)
    dims = tuple(range(2, probs.ndim))
    overlap = (probs * t).sum(dims)
    score = (2 * overlap + EPSILON) / (probs.sum(dims) + t.sum(dims) + EPSILON)
    return (1 - score[:, FOREGROUND]).mean()


def cross_entropy_loss(probs: Tensor, target: Tensor) -> Tensor:
    check_shapes(probs, target)
    p = probs.gather(1, class_indices(target).unsqueeze(1))
    return -p.clamp(PROB_FLOOR, 1.0).log().mean()


def modality_pairing_loss(xa: Tensor, xb: Tensor) -> Tensor:
    """Negative Pearson correlation between the branches' final features, per sample, averaged.
    A sample where either side is constant contributes 0.
    """
    if xa.shape != xb.shape:
        raise ShapeError(f"Branch features {tuple(xa.shape)} and {tuple(xb.shape)} differ")
    a, b = xa.flatten(1), xb.flatten(1)
    ca = a - a.mean(1, keepdim=True)
    cb = b - b.mean(1, keepdim=True)

    constant = (a.amax(1) == a.amin(1)) | (b.amax(1) == b.amin(1))
    # Substitute before the sqrt: its gradient at 0 would turn the masked branch into NaN
    energy = (ca * ca).sum(1) * (cb * cb).sum(1)
    denom = torch.sqrt(torch.where(constant, torch.ones_like(energy), energy))
    r = torch.where(constant, torch.zeros_like(denom), (ca * cb).sum(1) / denom)
    return -r.clamp(-1.0, 1.0).mean()


def compute_losses(
    probs: Tensor,
    target: Tensor,
    xa: Tensor,
    xb: Tensor | None,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Without xb there is nothing to pair, so the pairing term is 0"""
    d = dice_loss(probs, target)
    ce = cross_entropy_loss(probs, target)
    if xb is None:
        mp = torch.zeros((), dtype=probs.dtype, device=probs.device)
    else:
        mp = modality_pairing_loss(xa, xb)
    total = weights.dice * d + weights.ce * ce + weights.mp * mp
    return LossBreakdown(total, d, ce, mp)


def total_loss(
    probs: Tensor,
    target: Tensor,
    xa: Tensor,
    xb: Tensor | None,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    return compute_losses(probs, target, xa, xb, weights).total


def deep_supervision_weights(levels: int):
    """Level s weighs 2**-s, normalized to sum to 1"""
    raw = [2.0**-s for s in range(1, levels + 1)]
    return [w / sum(raw) for w in raw]


def deep_supervision_loss(aux_logits: list[Tensor], target: Tensor) -> Tensor:
    """Dice + CE of each auxiliary head against corner-downsampled labels"""
    loss = torch.zeros((), device=target.device)
    weights = deep_supervision_weights(len(aux_logits))
    for s, (logits, w) in enumerate(zip(aux_logits, weights, strict=True), start=1):
        t = corner_downsample(target, 2**s)
        probs = torch.softmax(logits, dim=1)
        loss = loss + w * (dice_loss(probs, t) + cross_entropy_loss(probs, t))
    return loss
