"""Dataset ingestion, deterministic splits, transforms, and batch iteration.

Datasets are either in-memory uint8 arrays (digits, synthetic) or lists of
image paths (class-per-directory folders). Evaluation passes always use the
deterministic transform; augmentation exists only for training-time use.
"""

import bz2
import csv
import gzip
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

DIGIT_NAMES = ("mnist", "usps", "svhn")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp", ".tif", ".tiff")


@dataclass
class DomainDataset:
    """An ordered image collection from one domain, optionally labeled."""

    domain: str
    split: str                      # train | val | test | full
    images: np.ndarray | None = None    # n x H x W [x 3] uint8
    paths: list | None = None
    labels: np.ndarray | None = None
    class_names: tuple | None = None

    def __post_init__(self):
        if (self.images is None) == (self.paths is None):
            raise ValueError("exactly one of images/paths must be set")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images) if self.images is not None else len(self.paths)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def get_image(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        with Image.open(self.paths[i]) as img:
            return np.asarray(img.convert("RGB"))

    def relabeled(self, labels) -> "DomainDataset":
        """Same images, different labels (or None to drop supervision)."""
        out = replace(self)
        out.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        return out

    def subset(self, indices, split: str | None = None) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            domain=self.domain,
            split=split or self.split,
            images=None if self.images is None else self.images[indices],
            paths=None if self.paths is None else [self.paths[i] for i in indices],
            labels=None if self.labels is None else self.labels[indices],
            class_names=self.class_names,
        )


def concat_datasets(a: DomainDataset, b: DomainDataset) -> DomainDataset:
    """Concatenate two like-stored datasets (both in-memory or both path-backed)."""
    if (a.images is None) != (b.images is None):
        raise ValueError("cannot concatenate in-memory and path-backed datasets")
    if a.labeled != b.labeled:
        raise ValueError("cannot concatenate labeled and unlabeled datasets")
    return DomainDataset(
        domain=a.domain, split=a.split,
        images=None if a.images is None else np.concatenate([a.images, b.images]),
        paths=None if a.paths is None else list(a.paths) + list(b.paths),
        labels=None if a.labels is None else np.concatenate([a.labels, b.labels]),
        class_names=a.class_names or b.class_names,
    )


# ---------------------------------------------------------------------------
# transforms

class DigitTransform:
    """uint8 grayscale -> float tensor in [-1, 1]; optional random translation."""

    def __init__(self, augment: bool = False, pad: int = 2):
        self.augment = augment
        self.pad = pad

    def batch(self, images: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0)
        x = x.unsqueeze(1)  # n x 1 x H x W
        x = x.sub_(0.5).div_(0.5)
        if self.augment:
            x = translate_batch(x, self.pad)
        return x

    def __call__(self, image: np.ndarray) -> torch.Tensor:
        return self.batch(image[None])[0]


class ObjectTransform:
    """Standard object-recognition pipeline: resize 256, crop 224, ImageNet stats.

    train=True uses a random crop and horizontal flip; otherwise the
    deterministic center crop (evaluation never augments).
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, train: bool = False, crop: int = 224, resize: int | None = None):
        from torchvision import transforms as T

        resize = crop + 32 if resize is None else resize
        steps = [T.ToPILImage(), T.Resize((resize, resize))]
        if train:
            steps += [T.RandomCrop(crop), T.RandomHorizontalFlip()]
        else:
            steps += [T.CenterCrop(crop)]
        steps += [T.ToTensor(), T.Normalize(self.MEAN, self.STD)]
        self.pipeline = T.Compose(steps)

    def __call__(self, image: np.ndarray) -> torch.Tensor:
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=-1)
        return self.pipeline(image)


def default_transform(dataset: DomainDataset, train: bool = False, image_size: int = 224):
    if dataset.images is not None and dataset.images.ndim == 3:
        return DigitTransform(augment=False)
    return ObjectTransform(train=train, crop=image_size)


def translate_batch(x: torch.Tensor, pad: int = 2) -> torch.Tensor:
    """Random per-sample shift of up to `pad` pixels (reflect padding)."""
    if pad == 0:
        return x
    n, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    off = torch.randint(0, 2 * pad + 1, (n, 2))
    out = torch.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, off[i, 0]:off[i, 0] + h, off[i, 1]:off[i, 1] + w]
    return out


def flip_batch(x: torch.Tensor) -> torch.Tensor:
    mask = torch.rand(x.shape[0]) < 0.5
    out = x.clone()
    out[mask] = torch.flip(out[mask], dims=[-1])
    return out


def iterate_batches(dataset: DomainDataset, transform, batch_size: int,
                    generator: torch.Generator | None = None,
                    shuffle: bool = False, drop_last: bool = False):
    """Yield (images, indices) batches in a deterministic order given the generator."""
    n = len(dataset)
    if shuffle:
        order = torch.randperm(n, generator=generator)
    else:
        order = torch.arange(n)
    fast = dataset.images is not None and hasattr(transform, "batch")
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        if fast:
            x = transform.batch(dataset.images[idx.numpy()])
        else:
            x = torch.stack([transform(dataset.get_image(int(i))) for i in idx])
        yield x, idx


# ---------------------------------------------------------------------------
# digit archives

def _read_idx(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        magic, = struct.unpack(">i", fh.read(4))
        ndim = magic % 256
        dims = struct.unpack(">" + "i" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(dims)


def _find_file(root: str, candidates) -> str:
    for name in candidates:
        path = os.path.join(root, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(
        f"none of {candidates} found under {root}; download the standard archives "
        "(see scripts/fetch_digits.py) and point the data root at them")


def _load_mnist(root: str):
    def pair(images, labels):
        x = _read_idx(_find_file(root, [images + ".gz", images]))
        y = _read_idx(_find_file(root, [labels + ".gz", labels])).astype(np.int64)
        return x, y

    train = pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    test = pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return train, test


def _load_usps(root: str):
    h5_path = os.path.join(root, "usps.h5")
    if os.path.exists(h5_path):
        import h5py

        with h5py.File(h5_path, "r") as fh:
            out = []
            for split in ("train", "test"):
                data = np.asarray(fh[split]["data"], dtype=np.float64)
                y = np.asarray(fh[split]["target"], dtype=np.int64)
                lo, hi = data.min(), data.max()
                x = ((data - lo) / max(hi - lo, 1e-12) * 255.0).round().astype(np.uint8)
                out.append((x.reshape(-1, 16, 16), y))
        return out[0], out[1]

    def read_bz2(name):
        path = _find_file(root, [name])
        xs, ys = [], []
        with bz2.open(path, "rt") as fh:
            for line in fh:
                parts = line.split()
                ys.append(int(float(parts[0])) - 1)  # archive labels run 1..10
                vals = np.zeros(256, dtype=np.float64)
                for item in parts[1:]:
                    idx, val = item.split(":")
                    vals[int(idx) - 1] = float(val)
                xs.append(((vals + 1.0) / 2.0 * 255.0).round().astype(np.uint8))
        return np.stack(xs).reshape(-1, 16, 16), np.asarray(ys, dtype=np.int64)

    return read_bz2("usps.bz2"), read_bz2("usps.t.bz2")


def _load_svhn(root: str):
    from scipy.io import loadmat

    def read(name):
        mat = loadmat(_find_file(root, [name]))
        x = np.transpose(mat["X"], (3, 0, 1, 2))  # n x 32 x 32 x 3
        y = mat["y"].reshape(-1).astype(np.int64) % 10  # archive uses 10 for digit 0
        return x, y

    return read("train_32x32.mat"), read("test_32x32.mat")


def conform_digits(images: np.ndarray, size: int) -> np.ndarray:
    """Grayscale and resize a digit image stack to size x size."""
    if images.ndim == 4:  # RGB -> luma
        images = np.dot(images.astype(np.float64), [0.299, 0.587, 0.114]).round().astype(np.uint8)
    if images.shape[1] == size:
        return images
    out = np.empty((len(images), size, size), dtype=np.uint8)
    for i, img in enumerate(images):
        out[i] = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    return out


def load_digits(name: str, root: str, image_size: int | None = None):
    """Load a standard digit benchmark as (train, test) DomainDatasets.

    Images are normalized to the task's size convention via `image_size`
    (28 for the handwritten pair, 32 for the street-number task) and to a
    single grayscale channel.
    """
    if name not in DIGIT_NAMES:
        raise ValueError(f"unknown digit dataset '{name}' (expected one of {DIGIT_NAMES})")
    base = os.path.join(root, name)
    if not os.path.isdir(base):
        raise FileNotFoundError(
            f"dataset directory {base} not found; fetch the archives with "
            "scripts/fetch_digits.py or set the data root environment variable")
    loader = {"mnist": _load_mnist, "usps": _load_usps, "svhn": _load_svhn}[name]
    (x_tr, y_tr), (x_te, y_te) = loader(base)
    if image_size is not None:
        x_tr, x_te = conform_digits(x_tr, image_size), conform_digits(x_te, image_size)
    names = tuple(str(i) for i in range(10))
    train = DomainDataset(domain=name, split="train", images=x_tr, labels=y_tr, class_names=names)
    test = DomainDataset(domain=name, split="test", images=x_te, labels=y_te, class_names=names)
    return train, test


# ---------------------------------------------------------------------------
# folder datasets

def load_image_folder(root: str, class_dirs=None) -> DomainDataset:
    """One directory per class; class index follows sorted directory order."""
    if class_dirs is None:
        class_dirs = sorted(d for d in os.listdir(root)
                            if os.path.isdir(os.path.join(root, d)))
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    paths, labels = [], []
    for label, cls in enumerate(class_dirs):
        cls_dir = os.path.join(root, cls)
        files = sorted(f for f in os.listdir(cls_dir)
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            warnings.warn(f"class directory '{cls}' is empty")
        for f in files:
            path = os.path.join(cls_dir, f)
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception as exc:
                log.warning("skipping unreadable image %s (%s)", path, exc)
                continue
            paths.append(path)
            labels.append(label)
    return DomainDataset(domain=os.path.basename(os.path.normpath(root)), split="full",
                         paths=paths, labels=np.asarray(labels, dtype=np.int64),
                         class_names=tuple(class_dirs))


# ---------------------------------------------------------------------------
# deterministic splits

def stratified_split(labels: np.ndarray, fractions, seed: int):
    """Partition indices into len(fractions) pools, stratified per class.

    Flooring remainders go to the first pool. Deterministic given the seed.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    rng = np.random.default_rng(seed)
    pools = [[] for _ in fractions]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        # guard against float dust, e.g. (1.0 - 0.9) * 20 = 1.9999999999999996
        sizes = [int(np.floor(f * len(idx) + 1e-9)) for f in fractions]
        sizes[0] += len(idx) - sum(sizes)
        start = 0
        for pool, size in zip(pools, sizes):
            pool.extend(idx[start:start + size])
            start += size
    return [np.sort(np.asarray(pool, dtype=np.int64)) for pool in pools]


def split_source(dataset: DomainDataset, ratio: float = 0.9, seed: int = 2019):
    """Deterministic train/validation split of labeled source data."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    if not dataset.labeled:
        raise ValueError("source split needs labels")
    counts = np.bincount(dataset.labels)
    if counts[counts > 0].min() < 2:
        warnings.warn("a class has fewer than 2 samples; falling back to an unstratified split")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(dataset))
        cut = int(np.floor(ratio * len(dataset)))
        train_idx, val_idx = np.sort(order[:cut]), np.sort(order[cut:])
    else:
        train_idx, val_idx = stratified_split(dataset.labels, (ratio, 1.0 - ratio), seed)
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


def target_eval_split(dataset: DomainDataset, fractions=(0.6, 0.2, 0.2), seed: int = 2019):
    """Stratified three-way split used only for target-supervised reference runs."""
    if len(fractions) != 3:
        raise ValueError("expected three fractions")
    train_idx, val_idx, test_idx = stratified_split(dataset.labels, fractions, seed)
    return (dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val"),
            dataset.subset(test_idx, "test"))


def write_split_manifest(path, dataset: DomainDataset, split_of_index: dict) -> None:
    """Persist (index, path, label, split) rows as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "path", "label", "split"])
        for i in range(len(dataset)):
            img_path = dataset.paths[i] if dataset.paths is not None else f"<memory:{dataset.domain}:{i}>"
            label = int(dataset.labels[i]) if dataset.labeled else -1
            writer.writerow([i, img_path, label, split_of_index.get(i, dataset.split)])
