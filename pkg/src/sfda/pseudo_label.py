"""Self-supervised pseudo labels from class centroids in feature space.

The pipeline is: soft (probability-weighted) centroids -> nearest-centroid
assignment -> hard class-mean centroids -> one final assignment. Exactly one
refinement round. Cosine distance throughout.
"""

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .core import AdaptationConfig

SOFT_MASS_FLOOR = 1e-8


@dataclass
class CentroidSet:
    """K centroids in feature space; absent classes never win an assignment."""

    centroids: torch.Tensor      # K x d
    present: torch.Tensor        # K bools
    member_counts: torch.Tensor  # K floats (soft mass or hard counts)
    generation: int              # 0 = soft, 1 = refined

    def __post_init__(self):
        if not self.present.any():
            raise ValueError("all centroids are absent")
        live = self.centroids[self.present]
        if not torch.isfinite(live).all():
            raise ValueError("present centroids must be finite")


@dataclass
class PseudoLabelAssignment:
    labels: torch.Tensor  # n hard labels
    centroids: CentroidSet
    distance: str = "cosine"


def _as_float_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.to(torch.get_default_dtype()) if not t.is_floating_point() else t


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]. Zero vectors are rejected."""
    a = torch.as_tensor(a).flatten().double()
    b = torch.as_tensor(b).flatten().double()
    na, nb = a.norm(), b.norm()
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine distance undefined for zero vectors")
    return float(1.0 - torch.dot(a, b) / (na * nb))


def soft_centroids(features, probs) -> CentroidSet:
    """Probability-weighted class means c_k = sum_i p_ik g_i / sum_i p_ik."""
    features, probs = _as_float_tensor(features), _as_float_tensor(probs)
    if features.shape[0] != probs.shape[0]:
        raise ValueError("features and probs disagree on n")
    mass = probs.sum(dim=0)                       # K
    present = mass >= SOFT_MASS_FLOOR
    weighted = probs.t() @ features               # K x d
    denom = mass.clamp_min(SOFT_MASS_FLOOR).unsqueeze(1)
    return CentroidSet(weighted / denom, present, mass, generation=0)


def _pairwise_cosine_distance(features: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    f = features / features.norm(dim=1, keepdim=True).clamp_min(1e-12)
    c = centroids / centroids.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return 1.0 - f @ c.t()


def nearest_centroid_assign(features, centroid_set: CentroidSet) -> torch.Tensor:
    """Argmin cosine distance over present centroids; ties go to the smallest index."""
    features = _as_float_tensor(features)
    dist = _pairwise_cosine_distance(features, centroid_set.centroids)
    dist = dist.masked_fill(~centroid_set.present.unsqueeze(0), float("inf"))
    return dist.argmin(dim=1)


def self_supervised_pseudo_labels(features, probs, cfg: AdaptationConfig,
                                  anchor_features=None, anchor_labels=None) -> PseudoLabelAssignment:
    """One soft round plus one hard refinement round of centroid labeling.

    In the partial-set scenario, refined centroids with fewer than cfg.t_c hard
    members are dropped before the final assignment. Optional anchors are
    labeled samples (semi-supervised targets): they enter every centroid
    computation with their true labels as one-hot weight but are not assigned.
    """
    features, probs = _as_float_tensor(features), _as_float_tensor(probs)
    num_classes = probs.shape[1]
    if anchor_features is not None and len(anchor_features) > 0:
        anchor_features = _as_float_tensor(anchor_features)
        anchor_labels = torch.as_tensor(anchor_labels).long()
        anchor_onehot = torch.nn.functional.one_hot(anchor_labels, num_classes)
        anchor_onehot = anchor_onehot.to(features.dtype)
        all_features = torch.cat([features, anchor_features], dim=0)
        all_weights0 = torch.cat([probs, anchor_onehot], dim=0)
    else:
        anchor_labels = None
        all_features, all_weights0 = features, probs

    initial = soft_centroids(all_features, all_weights0)
    labels = nearest_centroid_assign(features, initial)

    member_labels = labels if anchor_labels is None else torch.cat([labels, anchor_labels])
    counts = torch.bincount(member_labels, minlength=num_classes)
    sums = torch.zeros(num_classes, all_features.shape[1], dtype=all_features.dtype)
    sums.index_add_(0, member_labels, all_features)
    refined = initial.centroids.clone()  # empty classes fall back to the soft centroid
    nonempty = counts > 0
    refined[nonempty] = sums[nonempty] / counts[nonempty].unsqueeze(1).to(refined.dtype)

    present = initial.present.clone()
    if cfg.scenario == "partial":
        present &= counts >= cfg.t_c
    if not present.any():
        raise ValueError("no centroid survived partial-set filtering; lower t_c")
    centroid_set = CentroidSet(refined, present, counts.to(refined.dtype), generation=1)
    final_labels = nearest_centroid_assign(features, centroid_set)
    return PseudoLabelAssignment(final_labels, centroid_set)


def export_assignment(path, features, probs, labels) -> None:
    """Dump (features, probs, label) rows as CSV for offline inspection."""
    features = np.asarray(features)
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f_{j}" for j in range(features.shape[1])]
                        + [f"p_{k}" for k in range(probs.shape[1])] + ["label"])
        for i in range(features.shape[0]):
            writer.writerow(list(features[i]) + list(probs[i]) + [int(labels[i])])
