"""Training losses: overall counting, soft segmentation, per-category counting.

All losses are summed over pixels (and channels), not averaged; scale
differences between image sizes are absorbed by the learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_FLOOR = 1e-12


def scalar(value) -> float:
    """float() for plain numbers and (possibly grad-tracking) 0-dim tensors."""
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


@dataclass
class LossBreakdown:
    """Weighted combination of the three losses, kept apart for logging."""

    counting: torch.Tensor
    segmentation: torch.Tensor
    fine_grained: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float

    def row(self, step: int) -> dict:
        return {"step": step, "counting": scalar(self.counting),
                "segmentation": scalar(self.segmentation),
                "fine_grained": scalar(self.fine_grained),
                "total": scalar(self.total)}


def _check_aligned(a, b, what):
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"{what}: prediction {tuple(a.shape)} does not align "
                         f"with target {tuple(b.shape)}")


def counting_loss(first_density, refined_density, gt_total):
    """Squared error of both density stages against the summed target."""
    _check_aligned(refined_density, gt_total, "counting loss")
    _check_aligned(first_density, gt_total, "counting loss")
    return ((refined_density - gt_total) ** 2).sum() + \
        ((first_density - gt_total) ** 2).sum()


def segmentation_loss(first_seg, refined_seg, gt_seg):
    """Soft cross entropy of both segmentation stages over k+1 channels.

    Takes softmax probabilities; they are floored at LOG_FLOOR before the
    log so all-but-certain predictions stay finite.
    """
    _check_aligned(first_seg, gt_seg, "segmentation loss")
    if first_seg.shape[-3] != gt_seg.shape[-3]:
        raise ValueError("segmentation channel counts differ")
    log_first = first_seg.clamp(min=LOG_FLOOR).log()
    log_refined = refined_seg.clamp(min=LOG_FLOOR).log()
    return -(gt_seg * log_first).sum() - (gt_seg * log_refined).sum()


def segmentation_loss_from_logits(first_logits, refined_logits, gt_seg):
    """Same soft cross entropy, from raw logits.

    log-probabilities come from log_softmax, so saturated pixels keep a
    finite value and a live gradient instead of hitting the probability
    floor; used by the training path.
    """
    _check_aligned(first_logits, gt_seg, "segmentation loss")
    if first_logits.shape[-3] != gt_seg.shape[-3]:
        raise ValueError("segmentation channel counts differ")
    log_first = torch.log_softmax(first_logits, dim=-3)
    log_refined = torch.log_softmax(refined_logits, dim=-3)
    return -(gt_seg * log_first).sum() - (gt_seg * log_refined).sum()


def fine_grained_loss(fine_grained, gt_categories):
    """Sum of per-category squared counting errors."""
    _check_aligned(fine_grained, gt_categories, "fine-grained loss")
    if fine_grained.shape[-3] != gt_categories.shape[-3]:
        raise ValueError("category channel counts differ")
    return ((fine_grained - gt_categories) ** 2).sum()


def total_loss(counting, segmentation, fine_grained,
               alpha: float = 100.0, beta: float = 10.0) -> LossBreakdown:
    total = counting + alpha * segmentation + beta * fine_grained
    return LossBreakdown(counting=counting, segmentation=segmentation,
                         fine_grained=fine_grained, total=total,
                         alpha=alpha, beta=beta)


def compute_losses(outputs, gt_categories, gt_total, gt_seg,
                   alpha: float = 100.0, beta: float = 10.0) -> LossBreakdown:
    """All losses for one forward pass; seg-less models get zero lc and ls."""
    lf = fine_grained_loss(outputs.fine_grained, gt_categories)
    if outputs.refined_seg is None:
        zero = torch.zeros((), dtype=lf.dtype, device=lf.device)
        return total_loss(zero, zero, lf, alpha=alpha, beta=beta)
    lc = counting_loss(outputs.first_density, outputs.refined_density, gt_total)
    if outputs.first_seg_logits is not None:
        ls = segmentation_loss_from_logits(outputs.first_seg_logits,
                                           outputs.refined_seg_logits, gt_seg)
    else:
        ls = segmentation_loss(outputs.first_seg, outputs.refined_seg, gt_seg)
    return total_loss(lc, ls, lf, alpha=alpha, beta=beta)
