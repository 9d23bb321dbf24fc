"""Stage 0: train the source hypothesis (encoder + classifier) with label
smoothing and keep the checkpoint that scores best on a held-out split.
"""

import copy
import csv
import logging
import warnings

import torch

from . import losses
from .core import AdaptationConfig, build_sgd, seed_everything, set_progress
from .data_io import DomainDataset, default_transform, iterate_batches, split_source
from .networks import ModelBundle, build_model

__all__ = ["split_source", "train_source", "collect_predictions", "accuracy"]

log = logging.getLogger(__name__)


@torch.no_grad()
def collect_predictions(model: ModelBundle, dataset: DomainDataset, cfg: AdaptationConfig,
                        with_features: bool = False):
    """Deterministic full pass in evaluation mode: probabilities in dataset order.

    Never augments; batch-statistics layers stay on their running estimates.
    """
    transform = default_transform(dataset, train=False, image_size=cfg.image_size)
    was_training = model.training
    model.eval()
    probs, feats = [], []
    for x, _ in iterate_batches(dataset, transform, cfg.batch_size):
        f = model.features(x)
        probs.append(torch.softmax(model.classifier(f), dim=1))
        if with_features:
            feats.append(f)
    model.train(was_training)
    probs = torch.cat(probs)
    if with_features:
        return torch.cat(feats), probs
    return probs


def accuracy(probs: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels).long()
    return (probs.argmax(dim=1) == labels).double().mean().item() * 100.0


def train_source(dataset: DomainDataset, cfg: AdaptationConfig,
                 val_data: DomainDataset | None = None,
                 seed: int | None = None, log_path=None) -> ModelBundle:
    """Train encoder+classifier on labeled source data with smoothed CE.

    When no validation set is passed, a stratified 0.9/0.1 split of `dataset`
    provides one (digit tasks instead pass the source test set here). Returns
    the epoch checkpoint with the highest validation accuracy, later epochs
    winning ties. A non-finite training loss aborts with the last finite
    checkpoint and a warning.
    """
    if not dataset.labeled:
        raise ValueError("source training needs labels")
    seed = cfg.seeds[0] if seed is None else seed
    seed_everything(seed)
    if val_data is None:
        dataset, val_data = split_source(dataset, 0.9, seed)

    num_classes = len(dataset.class_names) if dataset.class_names else int(dataset.labels.max()) + 1
    model = build_model(num_classes, cfg)
    optimizer = build_sgd(model.param_groups(include_classifier=True), cfg)
    transform = default_transform(dataset, train=True, image_size=cfg.image_size)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.from_numpy(dataset.labels)

    steps_per_epoch = max(1, (len(dataset) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.source_epochs * steps_per_epoch
    step = 0
    best = {"acc": -1.0, "epoch": -1, "state": None}
    last_finite = copy.deepcopy(model.state_dict())
    history = []
    diverged = False

    for epoch in range(cfg.source_epochs):
        model.train()
        epoch_loss, seen = 0.0, 0
        for x, idx in iterate_batches(dataset, transform, cfg.batch_size,
                                      generator=gen, shuffle=True):
            set_progress(optimizer, cfg.eta0, step / max(1, total_steps))
            optimizer.zero_grad()
            loss = losses.cross_entropy_smoothed(model(x), labels[idx], cfg.alpha_ls)
            if not torch.isfinite(loss):
                warnings.warn(f"non-finite training loss at epoch {epoch}; "
                              "stopping with the last finite checkpoint")
                model.load_state_dict(best["state"] or last_finite)
                diverged = True
                break
            loss.backward()
            optimizer.step()
            step += 1
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)
        if diverged:
            break
        last_finite = copy.deepcopy(model.state_dict())
        val_acc = accuracy(collect_predictions(model, val_data, cfg), val_data.labels)
        history.append((epoch, epoch_loss / max(1, seen), val_acc))
        log.info("source epoch %d: loss %.4f val %.2f", epoch, history[-1][1], val_acc)
        if val_acc >= best["acc"]:
            best = {"acc": val_acc, "epoch": epoch, "state": copy.deepcopy(model.state_dict())}

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    model.best_val_accuracy = best["acc"]
    model.best_epoch = best["epoch"]

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_accuracy"])
            writer.writerows(history)
    return model
