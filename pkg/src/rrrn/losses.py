"""The three training objectives and their weighted combination.

All reductions are batch means so the loss weights stay scale-stable across
batch sizes. Hinge terms use subgradient 0 at the kink. Shift-invariant in
the logits (softmax terms are computed via log-softmax with max subtraction).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor
from torch.nn import functional as F


class LabelOutOfRangeError(Exception):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.02  # attention-margin hinge
    lambda1: float = 1.0  # region-bias term weight
    lambda2: float = 0.2  # correlation term weight

    def __post_init__(self):
        if self.beta < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _check_labels(labels: Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {num_classes}), got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-softmax of the true class."""
    _check_labels(labels, logits.shape[-1])
    log_probs = F.log_softmax(logits, dim=-1)
    return -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1).mean()


def rb_loss(alpha: Tensor, beta: float = 0.02) -> Tensor:
    """Hinge pushing the best crop's attention above the full region's.

    alpha is (..., R) with the full region at index 0; the margin beta must
    separate max over the crops (indices >= 1) from alpha_0.
    """
    if alpha.shape[-1] < 2:
        raise ValueError("need the full region plus at least one crop")
    crops_max = alpha[..., 1:].amax(dim=-1)
    per_sample = (beta - (crops_max - alpha[..., 0])).clamp_min(0.0)
    return per_sample.mean()


def cor_loss(region_logits: Tensor, logits: Tensor, labels: Tensor) -> Tensor:
    """Hinge keeping the aggregated feature's true-class confidence above
    every single region's.

    region_logits is (..., R, classes) from the shared region head, logits
    (..., classes) from the main head. Summed over regions, mean over batch.
    """
    if region_logits.shape[:-2] != logits.shape[:-1]:
        raise ValueError(
            f"region logits {tuple(region_logits.shape)} do not match "
            f"logits {tuple(logits.shape)}"
        )
    _check_labels(labels, logits.shape[-1])
    idx = labels.unsqueeze(-1)
    log_p_regions = F.log_softmax(region_logits, dim=-1).gather(
        -1, idx.unsqueeze(-1).expand(*region_logits.shape[:-1], 1)
    ).squeeze(-1)
    log_p_agg = F.log_softmax(logits, dim=-1).gather(-1, idx).squeeze(-1)
    hinge = (log_p_regions - log_p_agg.unsqueeze(-1)).clamp_min(0.0)
    return hinge.sum(dim=-1).mean()


def total_loss(cls_term, rb_term, cor_term, weights: LossWeights | None = None):
    """cls + lambda1 * rb + lambda2 * cor. Works on tensors or plain floats."""
    w = weights or LossWeights()
    return cls_term + w.lambda1 * rb_term + w.lambda2 * cor_term


class LossBreakdown(NamedTuple):
    total: Tensor
    cls: Tensor
    rb: Tensor
    cor: Tensor


def compute_losses(
    logits: Tensor,
    region_logits: Tensor,
    attention: Tensor,
    labels: Tensor,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """All three terms plus their weighted sum for one batch."""
    w = weights or LossWeights()
    cls_term = cross_entropy(logits, labels)
    rb_term = rb_loss(attention, w.beta)
    cor_term = cor_loss(region_logits, logits, labels)
    return LossBreakdown(
        total=total_loss(cls_term, rb_term, cor_term, w),
        cls=cls_term,
        rb=rb_term,
        cor=cor_term,
    )
