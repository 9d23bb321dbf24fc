"""Stage 2: entropy-split the target set and refine by semi-supervised learning.

Predictions from any stage (even a black-box model) are split into a
confident labeled pool and the rest; semi-supervised training then propagates
labels from the confident pool (consistency + sharpening + mixup) with a
freshly initialized classifier on top of the stage-1 encoder.
"""

import copy
import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .core import AdaptationConfig, build_sgd, seed_everything, set_progress
from .data_io import (DomainDataset, DigitTransform, ObjectTransform, concat_datasets,
                      default_transform, iterate_batches, translate_batch)
from .networks import ModelBundle, build_model
from .source_training import collect_predictions

log = logging.getLogger(__name__)


@dataclass
class EntropySplit:
    """Entropy-ranked partition of the target indices into two pools."""

    entropies: np.ndarray        # n
    fraction: float              # a
    quotas: np.ndarray           # t_k per class
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    predicted_labels: np.ndarray  # n, the labels the labeled pool carries

    def __post_init__(self):
        n = len(self.entropies)
        merged = np.concatenate([self.labeled_indices, self.unlabeled_indices])
        if len(merged) != n or len(np.unique(merged)) != n:
            raise ValueError("pools must partition the index set")


def split_fraction(entropies) -> float:
    """Share of samples strictly below the mean entropy."""
    entropies = np.asarray(entropies, dtype=np.float64)
    if entropies.size == 0:
        raise ValueError("need at least one entropy value")
    return float(np.count_nonzero(entropies < entropies.mean()) / entropies.size)


def class_balanced_split(entropies, predicted_labels, a: float, num_classes: int) -> EntropySplit:
    """Select the floor(a * count_k) lowest-entropy samples of every class.

    Equal entropies break toward the smaller sample index.
    """
    entropies = np.asarray(entropies, dtype=np.float64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if predicted_labels.min(initial=0) < 0 or predicted_labels.max(initial=0) >= num_classes:
        raise ValueError("predicted labels out of range")
    quotas = np.zeros(num_classes, dtype=np.int64)
    labeled = []
    for k in range(num_classes):
        members = np.flatnonzero(predicted_labels == k)
        # the 1e-9 guard absorbs float error in a*count for rational a = m/n
        quotas[k] = int(np.floor(a * len(members) + 1e-9))
        order = np.argsort(entropies[members], kind="stable")
        labeled.extend(members[order[:quotas[k]]])
    labeled = np.sort(np.asarray(labeled, dtype=np.int64))
    mask = np.zeros(len(entropies), dtype=bool)
    mask[labeled] = True
    return EntropySplit(entropies=entropies, fraction=a, quotas=quotas,
                        labeled_indices=labeled,
                        unlabeled_indices=np.flatnonzero(~mask),
                        predicted_labels=predicted_labels)


def export_split_csv(path, split: EntropySplit) -> None:
    pool = {int(i): "labeled" for i in split.labeled_indices}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "entropy", "predicted_label", "pool"])
        for i in range(len(split.entropies)):
            writer.writerow([i, f"{split.entropies[i]:.6f}",
                             int(split.predicted_labels[i]), pool.get(i, "unlabeled")])


def entropy_histogram(path, split: EntropySplit) -> None:
    """Overlaid entropy histograms of the two pools."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(split.entropies[split.labeled_indices], bins=30, alpha=0.6, label="labeled pool")
    ax.hist(split.entropies[split.unlabeled_indices], bins=30, alpha=0.6, label="unlabeled pool")
    ax.set_xlabel("prediction entropy")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sharpen(probs: torch.Tensor, temperature: float) -> torch.Tensor:
    powered = probs.clamp_min(losses.PROB_FLOOR) ** (1.0 / temperature)
    return powered / powered.sum(dim=1, keepdim=True)


def _augment_views(dataset: DomainDataset, indices, count: int, image_size: int):
    """`count` independently augmented tensor views of the chosen samples."""
    if dataset.images is not None and dataset.images.ndim == 3:
        base = DigitTransform().batch(dataset.images[np.asarray(indices)])
        return [translate_batch(base) for _ in range(count)]
    tf = ObjectTransform(train=True, crop=image_size)
    return [torch.stack([tf(dataset.get_image(int(i))) for i in indices])
            for _ in range(count)]


def _soft_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def mixmatch_refine(init_model: ModelBundle | None, split: EntropySplit,
                    target_data: DomainDataset, cfg: AdaptationConfig,
                    seed: int | None = None, log_path=None,
                    extra_labeled: DomainDataset | None = None):
    """Semi-supervised refinement from the confident pool.

    The encoder starts from `init_model` when cfg.mm_init_encoder is set (and a
    model is given); the classifier is always newly initialized and trainable.
    The labeled pool carries the split's predicted labels, never ground truth.
    Returns (refined model, full-pass probabilities over all of target_data).
    """
    if len(split.labeled_indices) == 0 and (extra_labeled is None or len(extra_labeled) == 0):
        raise ValueError("labeled pool is empty; inspect the split fraction a "
                         "(all-equal entropies give a=0)")
    seed = cfg.seeds[0] if seed is None else seed
    seed_everything(seed)

    num_classes = len(split.quotas)
    model = build_model(num_classes, cfg)
    if init_model is not None and cfg.mm_init_encoder:
        model.encoder.load_state_dict(copy.deepcopy(init_model.encoder.state_dict()))

    labeled = target_data.subset(split.labeled_indices).relabeled(
        split.predicted_labels[split.labeled_indices])
    if extra_labeled is not None and len(extra_labeled) > 0:
        labeled = concat_datasets(labeled, extra_labeled)
    unlabeled = target_data.subset(split.unlabeled_indices).relabeled(None)

    optimizer = build_sgd(model.param_groups(include_classifier=True), cfg)
    gen = torch.Generator().manual_seed(seed)
    lbl_gen = torch.Generator().manual_seed(seed + 1)
    labels = torch.from_numpy(labeled.labels)
    onehot_all = torch.nn.functional.one_hot(labels, num_classes).float()

    drive = unlabeled if len(unlabeled) > 0 else labeled
    steps_per_epoch = max(1, (len(drive) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.adapt_epochs * steps_per_epoch
    step = 0
    labeled_iter = None

    def next_labeled_indices():
        nonlocal labeled_iter
        while True:
            if labeled_iter is None:
                labeled_iter = iter(torch.randperm(len(labeled), generator=lbl_gen)
                                    .split(cfg.batch_size))
            chunk = next(labeled_iter, None)
            if chunk is not None and len(chunk) > 0:
                return chunk
            labeled_iter = None

    history = []
    for epoch in range(cfg.adapt_epochs):
        model.train()
        ep_lx, ep_lu, batches = 0.0, 0.0, 0
        order = torch.randperm(len(drive), generator=gen).split(cfg.batch_size)
        for chunk in order:
            set_progress(optimizer, cfg.eta0, step / max(1, total_steps))
            lbl_idx = next_labeled_indices()
            xl = _augment_views(labeled, lbl_idx.numpy(), 1, cfg.image_size)[0]
            tl = onehot_all[lbl_idx]
            if len(unlabeled) > 0:
                views = _augment_views(unlabeled, chunk.numpy(), cfg.mm_augment_count,
                                       cfg.image_size)
                with torch.no_grad():
                    q = torch.stack([torch.softmax(model(v), dim=1) for v in views]).mean(0)
                    q = sharpen(q, cfg.mm_temperature).detach()
                inputs = torch.cat([xl] + views)
                targets = torch.cat([tl] + [q] * len(views))
            else:
                inputs, targets = xl, tl

            lam = torch.distributions.Beta(cfg.mm_alpha, cfg.mm_alpha).sample().item()
            lam = max(lam, 1.0 - lam)
            perm = torch.randperm(inputs.shape[0], generator=gen)
            mixed_x = lam * inputs + (1.0 - lam) * inputs[perm]
            mixed_t = lam * targets + (1.0 - lam) * targets[perm]

            optimizer.zero_grad()
            logits = model(mixed_x)
            nl = xl.shape[0]
            loss_x = _soft_ce(logits[:nl], mixed_t[:nl])
            if len(unlabeled) > 0:
                probs_u = torch.softmax(logits[nl:], dim=1)
                loss_u = ((probs_u - mixed_t[nl:]) ** 2).mean()
            else:
                loss_u = logits.sum() * 0.0
            ramp = cfg.mm_lambda_u * min(1.0, step / max(1, total_steps))
            loss = loss_x + ramp * loss_u
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite refinement loss at epoch {epoch}: "
                                         f"loss_x={loss_x.item():.4g} loss_u={loss_u.item():.4g}")
            loss.backward()
            optimizer.step()
            step += 1
            ep_lx += loss_x.item()
            ep_lu += loss_u.item()
            batches += 1
        history.append([epoch, round(ep_lx / batches, 6), round(ep_lu / batches, 6)])
        log.info("refine epoch %d: loss_x %.4f loss_u %.4f", epoch, *history[-1][1:])

    probs = collect_predictions(model, target_data, cfg)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss_labeled", "loss_unlabeled"])
            writer.writerows(history)
    return model, probs


@dataclass
class LabelTransferResult:
    probabilities: torch.Tensor
    split: EntropySplit
    model: ModelBundle


def apply_to_predictions(predictions, model_init: ModelBundle | None,
                         target_data: DomainDataset, cfg: AdaptationConfig,
                         seed: int | None = None, log_path=None,
                         extra_labeled: DomainDataset | None = None) -> LabelTransferResult:
    """Entropy-split the given predictions, then refine them semi-supervised.

    `predictions` may come from any model, including a black box; `model_init`
    may be None, in which case the refinement network starts from scratch.
    """
    predictions = torch.as_tensor(predictions, dtype=torch.float32)
    losses.validate_probability_matrix(predictions)
    if predictions.shape[0] != len(target_data):
        raise ValueError("predictions and target data are misaligned")
    entropies = losses.prediction_entropy(predictions).numpy()
    predicted = predictions.argmax(dim=1).numpy()
    a = split_fraction(entropies)
    split = class_balanced_split(entropies, predicted, a, predictions.shape[1])
    model, probs = mixmatch_refine(model_init, split, target_data, cfg, seed=seed,
                                   log_path=log_path, extra_labeled=extra_labeled)
    return LabelTransferResult(probabilities=probs, split=split, model=model)
