"""Command-line front end.

Subcommands cover the full workflow: train-source, adapt (shot / shot-im),
label-transfer (the ++ stage, also usable on black-box predictions),
evaluate, and export-embeddings. Every run is determined by (config, seed).

Checkpoints are named `<source>2<target>_<seed>_<stage>.ckpt`; predictions
are CSV files with header `index,p_0,...,p_{K-1}`.
"""

import argparse
import builtins
import contextlib
import csv
import logging
import os
import sys

import numpy as np
import torch

from . import scenarios, synthetic
from .core import AdaptationConfig, ConfigError, data_root, load_config
from .data_io import DIGIT_NAMES, DomainDataset, load_digits, load_image_folder, split_source
from .hypothesis_transfer import adapt_shot
from .labeling_transfer import apply_to_predictions, entropy_histogram, export_split_csv
from .networks import load_checkpoint, save_checkpoint
from .source_training import collect_predictions, train_source

log = logging.getLogger(__name__)

SYNTH_NAMES = ("print", "script")


# ---------------------------------------------------------------------------
# file contracts

def write_predictions(path, probs) -> None:
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"p_{k}" for k in range(probs.shape[1])])
        for i, row in enumerate(probs):
            writer.writerow([i] + [f"{v:.8f}" for v in row])


def read_predictions(path) -> torch.Tensor:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "index" or len(header) < 2 \
                or any(h != f"p_{k}" for k, h in enumerate(header[1:])):
            raise ValueError(f"{path}: expected header index,p_0,...,p_K-1")
        rows = []
        for lineno, row in enumerate(reader):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields")
            if int(row[0]) != lineno:
                raise ValueError(f"{path}: row {lineno} is out of order")
            rows.append([float(v) for v in row[1:]])
    return torch.tensor(rows, dtype=torch.float32)


def write_labels(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, y in enumerate(labels):
            writer.writerow([i, int(y)])


def read_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.asarray([int(row[1]) for row in reader], dtype=np.int64)


@contextlib.contextmanager
def forbid_reads(prefix):
    """Fail any open() of a file under `prefix` while the context is active."""
    prefix = os.path.abspath(prefix)
    real_open = builtins.open

    def guarded(file, *args, **kwargs):
        if isinstance(file, (str, bytes, os.PathLike)):
            path = os.path.abspath(os.fsdecode(os.fspath(file)))
            if path == prefix or path.startswith(prefix + os.sep):
                raise PermissionError(f"adaptation must not read source data: {path}")
        return real_open(file, *args, **kwargs)

    builtins.open = guarded
    try:
        yield
    finally:
        builtins.open = real_open


# ---------------------------------------------------------------------------
# dataset resolution

_SYNTH_CACHE = {}


def _synthetic_pair(name: str):
    if not _SYNTH_CACHE:
        _SYNTH_CACHE.update(synthetic.make_transfer_pair(seed=0))
    side = "source" if name == "print" else "target"
    return _SYNTH_CACHE[f"{side}_train"], _SYNTH_CACHE[f"{side}_test"]


def resolve_dataset(name: str, cfg: AdaptationConfig):
    """Map a dataset name to (train, eval) splits.

    Digit benchmarks keep their standard train/test membership; the built-in
    rendered domains (print, script) need no files on disk; anything else is a
    class-per-directory folder under the data root, used both for training and
    evaluation as is conventional for the object benchmarks.
    """
    if name in SYNTH_NAMES:
        return _synthetic_pair(name)
    if name in DIGIT_NAMES:
        return load_digits(name, data_root(), image_size=cfg.image_size)
    folder = name if os.path.isdir(name) else os.path.join(data_root(), name)
    full = load_image_folder(folder)
    return full, full


def dataset_file_root(name: str) -> str | None:
    """The on-disk root holding a named dataset, if it has one."""
    if name in SYNTH_NAMES:
        return None
    if name in DIGIT_NAMES:
        return os.path.join(data_root(), name)
    return name if os.path.isdir(name) else os.path.join(data_root(), name)


def _load_cfg(args) -> AdaptationConfig:
    cfg = load_config(args.config) if args.config else AdaptationConfig()
    updates = {}
    for key in ("source", "target", "scenario"):
        value = getattr(args, key, None)
        if value:
            updates[key] = value
    if updates:
        cfg = cfg.replace(**updates)
    for key in ("source", "target"):
        if not getattr(cfg, key):
            raise ConfigError(f"config key '{key}' is required "
                              f"(set it in the config file or pass --{key})")
    return cfg


def _task(cfg) -> str:
    src = os.path.basename(os.path.normpath(cfg.source))
    tgt = os.path.basename(os.path.normpath(cfg.target))
    return f"{src}2{tgt}"


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


# ---------------------------------------------------------------------------
# subcommands

def cmd_train_source(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    train, val = resolve_dataset(cfg.source, cfg)
    if train is val:  # folder dataset: carve out a held-out validation split
        train, val = split_source(train, 0.9, seed)
    model = train_source(train, cfg, val_data=val, seed=seed,
                         log_path=os.path.join(args.out_dir, f"{_task(cfg)}_{seed}_source_log.csv"))
    path = os.path.join(args.out_dir, f"{_task(cfg)}_{seed}_source.ckpt")
    save_checkpoint(model, cfg, path, seed=seed, stage="source",
                    val_accuracy=model.best_val_accuracy)
    print(f"source model: {path} (val accuracy {model.best_val_accuracy:.2f})")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_cfg(args)
    if args.mode == "shot-im":
        cfg = cfg.replace(gamma1=0.0, gamma2=0.0)
    cfg = scenarios.pda_configure(cfg)
    seed = _seed(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    task = _task(cfg)

    source_root = dataset_file_root(cfg.source)
    target_root = dataset_file_root(cfg.target)
    if source_root and target_root and \
            os.path.abspath(source_root) == os.path.abspath(target_root):
        raise ConfigError("adaptation may not be pointed at the source data "
                          f"({source_root}); source-free means the source set stays closed")

    ckpt = args.checkpoint or os.path.join(args.out_dir, f"{task}_{seed}_source.ckpt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"source checkpoint {ckpt} not found; run train-source first")
    model, _ = load_checkpoint(ckpt)

    guard = forbid_reads(source_root) if source_root else contextlib.nullcontext()
    with guard:
        target_train, target_eval = resolve_dataset(cfg.target, cfg)
        log_path = os.path.join(args.out_dir, f"{task}_{seed}_{args.mode}_log.csv")
        adapted, _ = adapt_shot(model, target_train, cfg, seed=seed, log_path=log_path)
        probs = collect_predictions(adapted, target_eval, cfg)

    out_ckpt = os.path.join(args.out_dir, f"{task}_{seed}_{args.mode}.ckpt")
    save_checkpoint(adapted, cfg, out_ckpt, seed=seed, stage=args.mode)
    pred_path = os.path.join(args.out_dir, f"{task}_{seed}_{args.mode}_pred.csv")
    write_predictions(pred_path, probs.numpy())
    if target_eval.labeled:
        write_labels(os.path.join(args.out_dir, f"{task}_{seed}_labels.csv"),
                     target_eval.labels)
    print(f"adapted model: {out_ckpt}")
    print(f"predictions: {pred_path}")
    return 0


def cmd_label_transfer(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    task = _task(cfg)
    predictions = read_predictions(args.predictions)

    model_init = None
    if args.checkpoint:
        model_init, _ = load_checkpoint(args.checkpoint)
    target_train, target_eval = resolve_dataset(cfg.target, cfg)
    # the split is computed on whatever set the predictions describe
    data = target_eval if len(target_eval) == len(predictions) else target_train
    if len(data) != len(predictions):
        raise ConfigError(f"{args.predictions} has {len(predictions)} rows but the "
                          f"target splits have {len(target_train)}/{len(target_eval)} samples")
    data = data.relabeled(None)

    stem = os.path.splitext(os.path.basename(args.predictions))[0]
    stem = stem[:-len("_pred")] + "++" if stem.endswith("_pred") else stem + "++"
    result = apply_to_predictions(
        predictions, model_init, data, cfg, seed=seed,
        log_path=os.path.join(args.out_dir, f"{stem}_log.csv"))

    pred_path = os.path.join(args.out_dir, f"{stem}_pred.csv")
    write_predictions(pred_path, result.probabilities.numpy())
    export_split_csv(os.path.join(args.out_dir, f"{stem}_split.csv"), result.split)
    entropy_histogram(os.path.join(args.out_dir, f"{stem}_entropy.png"), result.split)
    save_checkpoint(result.model, cfg, os.path.join(args.out_dir, f"{task}_{seed}_{stem.split('_')[-1]}.ckpt"),
                    seed=seed, stage="label-transfer")
    print(f"refined predictions: {pred_path}")
    return 0


def _per_class(probs: torch.Tensor, labels: np.ndarray):
    guesses = probs.argmax(dim=1).numpy()
    overall = float((guesses == labels).mean() * 100.0)
    recalls = []
    for k in sorted(set(labels.tolist())):
        members = labels == k
        recalls.append(float((guesses[members] == k).mean() * 100.0))
    return overall, recalls


def cmd_evaluate(args) -> int:
    labels = read_labels(args.labels)
    lines, rows, overalls = [], [], []
    for path in args.predictions:
        probs = read_predictions(path)
        if len(probs) != len(labels):
            raise ConfigError(f"{path}: {len(probs)} predictions vs {len(labels)} labels")
        overall, recalls = _per_class(probs, labels)
        overalls.append(overall)
        per_class_mean = float(np.mean(recalls))
        lines.append(f"{os.path.basename(path)}: accuracy {overall:.2f}  "
                     f"per-class mean {per_class_mean:.2f}")
        rows.append([os.path.basename(path), f"{overall:.4f}", f"{per_class_mean:.4f}"]
                    + [f"{r:.4f}" for r in recalls])
    if len(overalls) > 1:
        lines.append(f"seeds aggregate: {np.mean(overalls):.2f} +/- {np.std(overalls):.2f} "
                     f"over {len(overalls)} runs")
        rows.append(["aggregate", f"{np.mean(overalls):.4f}", f"{np.std(overalls):.4f}"])
    report = "\n".join(lines)
    print(report)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "metrics.txt"), "w") as fh:
            fh.write(report + "\n")
        with open(os.path.join(args.out_dir, "metrics.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "overall", "per_class_mean_or_std"])
            writer.writerows(rows)
    return 0


def cmd_export_embeddings(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    cfg = AdaptationConfig(arch=payload["arch"], bottleneck_dim=payload["bottleneck_dim"],
                           image_size=payload.get("config", {}).get("image_size", 28))
    train, eval_set = resolve_dataset(args.target, cfg)
    dataset = {"train": train, "eval": eval_set}[args.split]
    feats, _ = collect_predictions(model, dataset, cfg, with_features=True)
    out = args.out or f"{os.path.splitext(os.path.basename(args.checkpoint))[0]}_embed.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f_{j}" for j in range(feats.shape[1])] + ["label"])
        for i in range(feats.shape[0]):
            label = int(dataset.labels[i]) if dataset.labeled else -1
            writer.writerow([f"{v:.6f}" for v in feats[i].tolist()] + [label])
    print(f"embeddings: {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfda",
        description="Source-free domain adaptation: source training, encoder "
                    "adaptation, and semi-supervised label refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--source", default=None, help="override the config's source dataset")
        p.add_argument("--target", default=None, help="override the config's target dataset")
        p.add_argument("--scenario", default=None,
                       choices=("closed", "partial", "multi-source", "semi-supervised"))
        p.add_argument("--out-dir", default="runs")

    p = sub.add_parser("train-source", help="train the source hypothesis")
    common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="source-free adaptation of the encoder")
    common(p)
    p.add_argument("--mode", choices=("shot", "shot-im"), default="shot")
    p.add_argument("--checkpoint", default=None, help="source checkpoint "
                   "(default: <out-dir>/<task>_<seed>_source.ckpt)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("label-transfer", help="entropy split + semi-supervised refinement")
    common(p)
    p.add_argument("--predictions", required=True, help="CSV of probabilities to refine")
    p.add_argument("--checkpoint", default=None,
                   help="encoder initialization (omit for a from-scratch network)")
    p.set_defaults(func=cmd_label_transfer)

    p = sub.add_parser("evaluate", help="accuracy report for prediction files")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--labels", required=True, help="CSV with header index,label")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="dump encoder features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
