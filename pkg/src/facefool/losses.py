"""Attack objective: L2 similarity plus a weighted hinge over per-proposal face margins.

Score matrices are (N, 2) tensors with columns ordered (background, face) and
hold unnormalized logits. The hinge term penalizes every proposal whose face
logit still exceeds its background logit; minimizing it drives face scores
below background so the detector labels each proposal background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

BACKGROUND_COL = 0
FACE_COL = 1


class LossError(ValueError):
    """Raised on non-finite or malformed loss inputs."""


@dataclass(frozen=True)
class LossBreakdown:
    """One objective evaluation: total == l2_term + penalty_weight * misclassify_term."""

    l2_term: float
    misclassify_term: float
    penalty_weight: float
    total: float

    @classmethod
    def from_terms(cls, l2_term: float, misclassify_term: float,
                   penalty_weight: float) -> "LossBreakdown":
        return cls(
            l2_term=l2_term,
            misclassify_term=misclassify_term,
            penalty_weight=penalty_weight,
            total=l2_term + penalty_weight * misclassify_term,
        )

    def to_json(self) -> str:
        return json.dumps({
            "l2": self.l2_term,
            "misclassify": self.misclassify_term,
            "penalty_weight": self.penalty_weight,
            "total": self.total,
        })


def l2_loss(x: torch.Tensor, x_prime: torch.Tensor) -> torch.Tensor:
    """Sum of squared element-wise differences (scalar tensor, differentiable)."""
    if x.shape != x_prime.shape:
        raise LossError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_prime.shape)}")
    return ((x - x_prime) ** 2).sum()


def misclassify_loss(z: torch.Tensor) -> torch.Tensor:
    """Sum over proposals of max(face_logit - background_logit, 0).

    Zero exactly when no proposal scores face above background; an empty score
    matrix contributes nothing.
    """
    if z.ndim != 2 or z.shape[1] != 2:
        raise LossError(f"expected (N, 2) score matrix, got shape {tuple(z.shape)}")
    if z.numel() == 0:
        return z.sum()  # zero scalar that stays on the autograd graph
    if not torch.isfinite(z).all():
        raise LossError("score matrix contains non-finite logits")
    margins = z[:, FACE_COL] - z[:, BACKGROUND_COL]
    return torch.clamp(margins, min=0.0).sum()


def total_loss(
    x: torch.Tensor,
    x_prime: torch.Tensor,
    z: torch.Tensor,
    penalty_weight: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """L2 term plus weighted hinge term.

    Returns the differentiable scalar (for backward through x_prime and
    anything upstream of it) together with a float breakdown of its parts.
    """
    if penalty_weight <= 0:
        raise LossError(f"penalty_weight must be > 0, got {penalty_weight}")
    l2 = l2_loss(x, x_prime)
    mis = misclassify_loss(z)
    total = l2 + penalty_weight * mis
    if not torch.isfinite(total):
        raise LossError("total loss is non-finite")
    breakdown = LossBreakdown.from_terms(float(l2), float(mis), float(penalty_weight))
    return total, breakdown
