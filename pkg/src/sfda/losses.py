"""Training objectives, each a pure function of network outputs.

All losses use natural log and mean reduction over the batch. Probabilities
are clamped at PROB_FLOOR so that 0 * log 0 evaluates to 0.
"""

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")


def smoothed_targets(labels: torch.Tensor, num_classes: int, alpha: float) -> torch.Tensor:
    """Soft targets (1-alpha) * one_hot + alpha / K. Rows sum to 1 exactly."""
    if labels.min().item() < 0 or labels.max().item() >= num_classes:
        raise ValueError("label out of range [0, K)")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("smoothing alpha must lie in [0, 1)")
    one_hot = F.one_hot(labels.long(), num_classes).to(torch.get_default_dtype())
    return (1.0 - alpha) * one_hot + alpha / num_classes


def cross_entropy_smoothed(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 0.0) -> torch.Tensor:
    """Label-smoothed cross entropy; plain cross entropy when alpha = 0."""
    _check_finite(logits, "logits")
    targets = smoothed_targets(labels, logits.shape[1], alpha).to(logits.dtype)
    log_probs = F.log_softmax(logits, dim=1)
    return -(targets * log_probs).sum(dim=1).mean()


def entropy_term(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-row entropy -sum_k p_k log p_k."""
    p = probs.clamp_min(PROB_FLOOR)
    return -(p * p.log()).sum(dim=1).mean()


def diversity_term(probs: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the mean prediction; minimized by uniform class usage.

    Equals KL(mean_probs || uniform) - log K.
    """
    p_hat = probs.mean(dim=0).clamp_min(PROB_FLOOR)
    return (p_hat * p_hat.log()).sum()


def im_loss(probs: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Information-maximization objective: entropy_term + beta * diversity_term."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    loss = entropy_term(probs)
    if beta != 0.0:
        loss = loss + beta * diversity_term(probs)
    return loss


def pseudo_label_ce(logits: torch.Tensor, pseudo_labels: torch.Tensor, gamma1: float) -> torch.Tensor:
    """Weighted cross entropy against hard pseudo labels."""
    if gamma1 < 0:
        raise ValueError("gamma1 must be >= 0")
    if gamma1 == 0.0:
        return logits.sum() * 0.0
    return gamma1 * cross_entropy_smoothed(logits, pseudo_labels, alpha=0.0)


def rotation_ce(rotation_logits: torch.Tensor, rotation_labels: torch.Tensor, gamma2: float) -> torch.Tensor:
    """Weighted cross entropy over the 4 relative-rotation classes."""
    if rotation_logits.shape[1] != 4:
        raise ValueError("rotation logits must have exactly 4 columns")
    if gamma2 < 0:
        raise ValueError("gamma2 must be >= 0")
    if gamma2 == 0.0:
        return rotation_logits.sum() * 0.0
    return gamma2 * cross_entropy_smoothed(rotation_logits, rotation_labels, alpha=0.0)


def prediction_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Per-row entropy -sum_k p_k log p_k; a confidence score (low = confident).

    Accepts a single probability row or an n x K matrix; returns a scalar or a
    length-n vector accordingly.
    """
    single = probs.dim() == 1
    p = (probs.unsqueeze(0) if single else probs).clamp_min(PROB_FLOOR)
    ent = -(p * p.log()).sum(dim=1)
    return ent[0] if single else ent


def validate_probability_matrix(probs: torch.Tensor, atol: float = 1e-6) -> None:
    """Raise if rows are not valid probability distributions."""
    if probs.dim() != 2:
        raise ValueError("expected an n x K matrix")
    _check_finite(probs, "probabilities")
    if (probs < 0).any():
        raise ValueError("negative probability entries")
    row_sums = probs.sum(dim=1)
    if (row_sums - 1.0).abs().max().item() > atol:
        raise ValueError("probability rows must sum to 1")
