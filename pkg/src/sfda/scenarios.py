"""Multi-source, partial-set, and semi-supervised orchestration.

All three variants reuse the single-pair primitives: multi-source fuses
per-pair probability matrices, partial-set reconfigures the objective
(no diversity term, small-centroid filtering), and semi-supervised threads a
few labeled target samples through the adaptation loop and the refinement
stage.
"""

import copy
import logging

import numpy as np
import torch

from . import losses
from .core import AdaptationConfig, build_sgd, freeze_classifier, seed_everything, set_progress
from .data_io import DomainDataset, default_transform, iterate_batches
from .hypothesis_transfer import adapt_shot
from .labeling_transfer import LabelTransferResult, apply_to_predictions
from .networks import ModelBundle

log = logging.getLogger(__name__)


def msda_fuse(score_matrices) -> torch.Tensor:
    """Sum per-source probability matrices and take the argmax.

    Ties go to the smallest class index.
    """
    if not score_matrices:
        raise ValueError("need at least one score matrix")
    matrices = [torch.as_tensor(m, dtype=torch.float64) for m in score_matrices]
    shape = matrices[0].shape
    for m in matrices[1:]:
        if m.shape != shape:
            raise ValueError(f"score matrix shapes differ: {tuple(m.shape)} vs {tuple(shape)}")
    total = torch.stack(matrices).sum(dim=0)
    return total.argmax(dim=1)


def msda_pipeline(source_models, target_data: DomainDataset, cfg: AdaptationConfig,
                  plus: bool = False, seed: int | None = None):
    """Adapt each source model to the target independently, then fuse.

    With `plus`, every pair additionally goes through labeling transfer and
    the refined matrices are averaged before the argmax (argmax-equivalent to
    summing). Returns (fused predictions, list of per-pair matrices).
    """
    if not source_models:
        raise ValueError("need at least one source model")
    matrices = []
    for i, src in enumerate(source_models):
        model, probs = adapt_shot(src, target_data, cfg, seed=seed)
        if plus:
            result = apply_to_predictions(probs, model, target_data, cfg, seed=seed)
            probs = result.probabilities
        log.info("multi-source pair %d/%d adapted", i + 1, len(source_models))
        matrices.append(probs)
    return msda_fuse(matrices), matrices


def pda_configure(cfg: AdaptationConfig) -> AdaptationConfig:
    """Partial-set objective: drop the diversity term and filter tiny centroids.

    A no-op outside the partial scenario; idempotent.
    """
    if cfg.scenario != "partial":
        return cfg
    return cfg.replace(beta=0.0)


def _supervised_finetune(model: ModelBundle, labeled: DomainDataset,
                         cfg: AdaptationConfig, seed: int):
    """Degenerate SSDA with no unlabeled data: smoothed CE on the labeled set."""
    optimizer = build_sgd(model.param_groups(include_classifier=False), cfg)
    tf = default_transform(labeled, train=True, image_size=cfg.image_size)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.from_numpy(labeled.labels)
    steps_per_epoch = max(1, (len(labeled) + cfg.batch_size - 1) // cfg.batch_size)
    total = cfg.adapt_epochs * steps_per_epoch
    step = 0
    model.train()
    for _ in range(cfg.adapt_epochs):
        for x, idx in iterate_batches(labeled, tf, cfg.batch_size, generator=gen, shuffle=True):
            set_progress(optimizer, cfg.eta0, step / max(1, total))
            optimizer.zero_grad()
            loss = losses.cross_entropy_smoothed(model(x), labels[idx], cfg.alpha_ls)
            loss.backward()
            optimizer.step()
            step += 1
    return model


def ssda_adapt(source_model: ModelBundle, labeled_target: DomainDataset,
               unlabeled_target: DomainDataset, cfg: AdaptationConfig,
               seed: int | None = None, log_path=None):
    """Semi-supervised adaptation: full unsupervised objective on the unlabeled
    pool plus smoothed CE on the labeled samples, which also anchor the
    centroid estimates with their true labels.

    Returns (model, probabilities on the unlabeled pool).
    """
    if labeled_target is None or len(labeled_target) == 0:
        raise ValueError("semi-supervised adaptation needs at least one labeled target sample")
    if not labeled_target.labeled:
        raise ValueError("labeled_target carries no labels")
    if len(unlabeled_target) == 0:
        seed = cfg.seeds[0] if seed is None else seed
        seed_everything(seed)
        model = freeze_classifier(copy.deepcopy(source_model))
        model = _supervised_finetune(model, labeled_target, cfg, seed)
        empty = torch.zeros((0, model.num_classes))
        return model, empty
    return adapt_shot(source_model, unlabeled_target, cfg, seed=seed,
                      log_path=log_path, labeled_data=labeled_target)


def ssda_label_transfer(predictions, model_init: ModelBundle | None,
                        labeled_target: DomainDataset, unlabeled_target: DomainDataset,
                        cfg: AdaptationConfig, seed: int | None = None) -> LabelTransferResult:
    """The ++ stage under semi-supervision: split only the unlabeled pool, then
    add the labeled samples (with true labels) to the labeled split."""
    return apply_to_predictions(predictions, model_init, unlabeled_target, cfg,
                                seed=seed, extra_labeled=labeled_target)


def few_shot_split(dataset: DomainDataset, shots: int, seed: int):
    """Sample `shots` labeled examples per class; the rest become unlabeled."""
    rng = np.random.default_rng(seed)
    labeled_idx = []
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < shots:
            raise ValueError(f"class {cls} has fewer than {shots} samples")
        labeled_idx.extend(rng.choice(members, size=shots, replace=False))
    labeled_idx = np.sort(np.asarray(labeled_idx))
    mask = np.zeros(len(dataset), dtype=bool)
    mask[labeled_idx] = True
    unlabeled = dataset.subset(np.flatnonzero(~mask)).relabeled(None)
    return dataset.subset(labeled_idx), unlabeled
