"""Composite training objective: log-MSE density loss, BCE domain loss,
and the ramp schedule for the gradient-reversal coefficient.

The total objective is the unweighted sum of the two terms; the reversal
coefficient lambda acts only inside the gradient reversal layer, never as a
weight on the domain loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

from adacount.core import DomainTag

# Floor inside the log of the density loss: the raw log-MSE is -inf at zero
# error, so the loss is bounded below by log(MSE_EPS).
MSE_EPS = 1e-12
# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the BCE logs.
PROB_EPS = 1e-7

SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0


@dataclass(frozen=True)
class LambdaSchedule:
    """Monotone ramp of the reversal coefficient from 0 toward (but never reaching) 1."""

    total_iterations: int
    gamma: float = 10.0

    def __post_init__(self) -> None:
        if self.total_iterations <= 0:
            raise ValueError(f"total_iterations must be > 0, got {self.total_iterations}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


def lambda_at(s: LambdaSchedule, iteration: int) -> float:
    """lambda = 2 / (1 + exp(-gamma * p)) - 1 with p = iteration / total_iterations."""
    if not 0 <= iteration <= s.total_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {s.total_iterations}]"
        )
    p = iteration / s.total_iterations
    return 2.0 / (1.0 + math.exp(-s.gamma * p)) - 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Per-iteration loss terms kept separate for logging."""

    density_loss: float
    domain_loss: float
    total: float


def density_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """log(eps + mean squared error) over all pixels and the batch.

    Computed on source-domain samples only; callers slice the batch.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("empty batch")
    return torch.log(MSE_EPS + torch.mean((pred - target) ** 2))


def domain_labels(
    tags: Sequence[DomainTag], dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Encode SOURCE as 1 and TARGET as 0."""
    return torch.tensor(
        [SOURCE_LABEL if t is DomainTag.SOURCE else TARGET_LABEL for t in tags], dtype=dtype
    )


def domain_loss(
    pred_prob: torch.Tensor, tags: Union[torch.Tensor, Sequence[DomainTag]]
) -> torch.Tensor:
    """Mean binary cross-entropy of domain predictions against domain tags."""
    if not isinstance(tags, torch.Tensor):
        tags = domain_labels(tags, dtype=pred_prob.dtype)
    if pred_prob.shape != tags.shape:
        raise ValueError(f"shape mismatch: probs {tuple(pred_prob.shape)} vs tags {tuple(tags.shape)}")
    if pred_prob.numel() == 0:
        raise ValueError("empty batch")
    p = pred_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(tags * torch.log(p) + (1.0 - tags) * torch.log(1.0 - p)).mean()


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def total_loss(density: float, domain: float) -> LossBreakdown:
    """Unweighted sum of the two loss terms; rejects non-finite inputs."""
    if not (math.isfinite(density) and math.isfinite(domain)):
        raise DivergenceError(
            f"non-finite loss: density={density}, domain={domain}"
        )
    return LossBreakdown(density_loss=density, domain_loss=domain, total=density + domain)
