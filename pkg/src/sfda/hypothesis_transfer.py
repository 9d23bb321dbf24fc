"""Stage 1: source-free adaptation of the feature encoder.

The classifier stays frozen; the encoder (plus an auxiliary rotation head)
trains under information maximization, centroid pseudo-labels refreshed once
per epoch from a frozen full pass, and relative-rotation self-supervision.
"""

import copy
import csv
import logging
from dataclasses import dataclass

import torch

from . import losses
from .core import (AdaptationConfig, build_sgd, freeze_classifier, seed_everything,
                   set_progress, state_digest)
from .data_io import DomainDataset, default_transform, iterate_batches
from .networks import ModelBundle
from .pseudo_label import self_supervised_pseudo_labels
from .source_training import accuracy, collect_predictions

log = logging.getLogger(__name__)

ROTATION_DEGREES = (0, 90, 180, 270)


@dataclass
class RotationBatch:
    """Original images, rotation class per image, and the rotated copies.

    Rotation class z maps to a counter-clockwise rotation by 90*z degrees,
    an exact pixel permutation; z=0 leaves the image bit-identical.
    """

    images: torch.Tensor
    labels: torch.Tensor
    rotated: torch.Tensor


def rotate_images(images: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Rotate each image counter-clockwise by 90 degrees times its z."""
    out = images.clone()
    for k in (1, 2, 3):
        mask = z == k
        if mask.any():
            out[mask] = torch.rot90(images[mask], k=k, dims=(-2, -1))
    return out


def make_rotation_batch(images: torch.Tensor, rng: torch.Generator | None = None,
                        pad_policy: str = "none") -> RotationBatch:
    """Sample one rotation class per image uniformly from the 4-way pool."""
    if images.shape[-1] != images.shape[-2]:
        if pad_policy != "zero":
            raise ValueError("rotation needs square images; set rotation_pad='zero' "
                             "to zero-pad non-square inputs")
        h, w = images.shape[-2], images.shape[-1]
        side = max(h, w)
        ph, pw = side - h, side - w
        images = torch.nn.functional.pad(
            images, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))
    z = torch.randint(0, 4, (images.shape[0],), generator=rng)
    return RotationBatch(images=images, labels=z, rotated=rotate_images(images, z))


def rotation_forward(model: ModelBundle, batch: RotationBatch) -> torch.Tensor:
    """4-way scores from the head applied to [g(x), g(x^z)], original first."""
    if model.rotation_head is None:
        raise RuntimeError("no rotation head attached; call attach_rotation_head() first")
    return model.rotation_head(model.features(batch.images), model.features(batch.rotated))


def full_pass(model: ModelBundle, dataset: DomainDataset, cfg: AdaptationConfig):
    """Frozen-snapshot features and probabilities for the whole dataset."""
    return collect_predictions(model, dataset, cfg, with_features=True)


def adapt_shot(source_model: ModelBundle, target_data: DomainDataset,
               cfg: AdaptationConfig, seed: int | None = None, log_path=None,
               labeled_data: DomainDataset | None = None):
    """Adapt a copy of the source model to unlabeled target data.

    Per epoch: a frozen full pass refreshes centroid pseudo-labels (skipped
    when gamma1=0, which makes this the pure information-maximization
    variant), then SGD minimizes entropy + beta*diversity + gamma1*pseudo-CE +
    gamma2*rotation-CE over shuffled batches. Optional `labeled_data`
    (semi-supervised scenario) is interleaved 1:1 and adds a smoothed CE term,
    and its samples anchor the centroid computation with one-hot weights.

    Returns (adapted model, final full-pass probabilities). The source model
    is left untouched; its classifier is copied and kept frozen throughout.
    """
    if len(target_data) == 0:
        raise ValueError("empty target set")
    seed = cfg.seeds[0] if seed is None else seed
    seed_everything(seed)

    model = copy.deepcopy(source_model)
    freeze_classifier(model)
    if cfg.gamma2 > 0:
        model.attach_rotation_head()
    optimizer = build_sgd(model.param_groups(include_classifier=False), cfg)

    train_tf = default_transform(target_data, train=True, image_size=cfg.image_size)
    gen = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, (len(target_data) + cfg.batch_size - 1) // cfg.batch_size)
    if labeled_data is not None and len(labeled_data) == 0:
        labeled_data = None
    labeled_iter = None
    if labeled_data is not None:
        labeled_tf = default_transform(labeled_data, train=True, image_size=cfg.image_size)
        labeled_gen = torch.Generator().manual_seed(seed + 1)
        labeled_labels = torch.from_numpy(labeled_data.labels)

        def next_labeled():
            nonlocal labeled_iter
            while True:
                if labeled_iter is None:
                    labeled_iter = iterate_batches(labeled_data, labeled_tf, cfg.batch_size,
                                                   generator=labeled_gen, shuffle=True)
                batch = next(labeled_iter, None)
                if batch is not None:
                    return batch
                labeled_iter = None

    total_steps = cfg.adapt_epochs * steps_per_epoch
    step = 0
    history = []
    probs = None
    for epoch in range(cfg.adapt_epochs):
        feats, probs = full_pass(model, target_data, cfg)
        if epoch > 0:
            history[-1].append(_eval_accuracy(probs, target_data))
        pseudo = None
        if cfg.gamma1 > 0:
            anchor_feats = anchor_labels = None
            if labeled_data is not None:
                anchor_feats, _ = full_pass(model, labeled_data, cfg)
                anchor_labels = labeled_labels
            pseudo = self_supervised_pseudo_labels(feats, probs, cfg,
                                                   anchor_features=anchor_feats,
                                                   anchor_labels=anchor_labels)
        model.train()
        sums = torch.zeros(4)
        for x, idx in iterate_batches(target_data, train_tf, cfg.batch_size,
                                      generator=gen, shuffle=True):
            set_progress(optimizer, cfg.eta0, step / max(1, total_steps))
            optimizer.zero_grad()
            f = model.features(x)
            logits = model.classifier(f)
            p = torch.softmax(logits, dim=1)
            l_ent = losses.entropy_term(p)
            l_div = losses.diversity_term(p)
            l_ssl1 = losses.pseudo_label_ce(logits, pseudo.labels[idx], cfg.gamma1) \
                if pseudo is not None else logits.sum() * 0.0
            if cfg.gamma2 > 0:
                rb = make_rotation_batch(x, gen, cfg.rotation_pad)
                scores = model.rotation_head(f, model.features(rb.rotated))
                l_ssl2 = losses.rotation_ce(scores, rb.labels, cfg.gamma2)
            else:
                l_ssl2 = logits.sum() * 0.0
            loss = l_ent + cfg.beta * l_div + l_ssl1 + l_ssl2
            if labeled_data is not None:
                xl, idxl = next_labeled()
                loss = loss + losses.cross_entropy_smoothed(
                    model(xl), labeled_labels[idxl], cfg.alpha_ls)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite adaptation loss at epoch {epoch} step {step}: "
                    f"ent={l_ent.item():.4g} div={l_div.item():.4g} "
                    f"ssl1={l_ssl1.item():.4g} ssl2={l_ssl2.item():.4g}")
            loss.backward()
            optimizer.step()
            step += 1
            sums += torch.tensor([l_ent.item(), l_div.item(), l_ssl1.item(), l_ssl2.item()])
        means = sums / steps_per_epoch
        history.append([epoch, *[round(v, 6) for v in means.tolist()]])
        log.info("adapt epoch %d: ent %.4f div %.4f ssl1 %.4f ssl2 %.4f",
                 epoch, *means.tolist())

    _, probs = full_pass(model, target_data, cfg)
    if history:
        history[-1].append(_eval_accuracy(probs, target_data))
    model.rotation_head = None  # auxiliary task only; discarded at inference

    if state_digest(model.classifier) != model.classifier_digest:
        raise RuntimeError("classifier changed during adaptation")

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "L_ent", "L_div", "L_ssl1", "L_ssl2", "accuracy"])
            writer.writerows(history)
    return model, probs


def _eval_accuracy(probs: torch.Tensor, dataset: DomainDataset):
    return round(accuracy(probs, dataset.labels), 4) if dataset.labeled else ""
