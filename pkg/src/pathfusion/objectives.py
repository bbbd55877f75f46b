"""Task heads and losses: cross-entropy, discrete-hazard survival NLL, and
the dual-expert combination of per-magnification logits."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

TASK_CLASSES = {"diagnosis": 4, "grading": 3, "survival": 4}

_PROB_FLOOR = 1e-7


def task_output_width(task: str) -> int:
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}")
    return TASK_CLASSES[task]


def make_classifier_head(in_width: int, n_out: int) -> nn.Linear:
    """Single affine map from a representation to class (or hazard) logits."""
    return nn.Linear(in_width, n_out)


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true label."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return F.cross_entropy(logits, labels)


def dual_expert_combine(logits10: torch.Tensor, logits20: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """Blend the two magnification experts with a learned scalar gate.

    alpha = sigmoid(gate) weights the 10x expert; 1 - alpha the 20x expert.
    """
    if logits10.shape != logits20.shape:
        raise ValueError(f"expert logits shapes differ: {tuple(logits10.shape)} vs {tuple(logits20.shape)}")
    alpha = torch.sigmoid(gate)
    return alpha * logits10 + (1.0 - alpha) * logits20


def hazard_curve(hazard_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-bin hazards and the survival curve S(j) = prod_{m<=j}(1 - h_m)."""
    hazards = torch.sigmoid(hazard_logits).clamp(_PROB_FLOOR, 1.0 - _PROB_FLOOR)
    survival = torch.cumprod(1.0 - hazards, dim=1)
    return hazards, survival


def survival_nll_per_case(
    hazard_logits: torch.Tensor, bins: torch.Tensor, censored: torch.Tensor
) -> torch.Tensor:
    """Discrete-time negative log-likelihood per case.

    Uncensored with event bin y: -log S(y-1) - log h_y (S(-1) = 1).
    Censored at bin y: -log S(y).
    """
    n_bins = hazard_logits.shape[1]
    if bins.min() < 0 or bins.max() >= n_bins:
        raise ValueError("survival bin out of range")
    hazards, survival = hazard_curve(hazard_logits)
    idx = bins.view(-1, 1)
    s_at = survival.gather(1, idx).squeeze(1)
    h_at = hazards.gather(1, idx).squeeze(1)
    s_prev = torch.where(
        bins > 0,
        survival.gather(1, (bins - 1).clamp(min=0).view(-1, 1)).squeeze(1),
        torch.ones_like(s_at),
    )
    censored = censored.to(torch.bool)
    uncensored_nll = -torch.log(s_prev) - torch.log(h_at)
    censored_nll = -torch.log(s_at)
    return torch.where(censored, censored_nll, uncensored_nll)


def survival_nll(hazard_logits: torch.Tensor, bins: torch.Tensor, censored: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-case discrete-hazard NLL."""
    return survival_nll_per_case(hazard_logits, bins, censored).mean()


def survival_confidence(hazard_logits: torch.Tensor, bins: torch.Tensor, censored: torch.Tensor) -> torch.Tensor:
    """Per-case likelihood of the observed outcome, in (0, 1).

    Plays the role of the true-label probability when the task has hazards
    instead of a class distribution.
    """
    return torch.exp(-survival_nll_per_case(hazard_logits, bins, censored))


def cumulative_hazard_risk(hazard_logits: torch.Tensor) -> torch.Tensor:
    """Scalar risk score per case: sum of per-bin hazard probabilities."""
    hazards, _ = hazard_curve(hazard_logits)
    return hazards.sum(dim=1)
