"""Self-contained rendered-digit domains for tests and desk-scale experiments.

Glyphs are rasterized from the TTF fonts bundled with matplotlib, so the
domains are available on any machine without downloading benchmark archives.
The "print" domain uses clean sans-serif/monospace glyphs; the "script"
domain switches to serif faces and degrades the image with blur and sensor
noise, giving a genuine covariate shift at LeNet scale.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .data_io import DomainDataset

DOMAIN_FONTS = {
    "print": ("DejaVuSans.ttf", "DejaVuSansMono.ttf"),
    "script": ("DejaVuSerif-Bold.ttf", "DejaVuSerif-Italic.ttf"),
}


@dataclass
class DomainStyle:
    fonts: tuple
    blur: tuple = (0.0, 0.0)        # gaussian radius range
    noise: tuple = (0.0, 0.0)       # additive noise sigma range (uint8 scale)
    contrast: tuple = (1.0, 1.0)    # foreground intensity scale range


STYLES = {
    "print": DomainStyle(DOMAIN_FONTS["print"]),
    "script": DomainStyle(DOMAIN_FONTS["script"], blur=(0.5, 0.9),
                          noise=(6.0, 16.0), contrast=(0.75, 1.0)),
}


def _font_dir() -> str:
    import matplotlib

    return os.path.join(matplotlib.get_data_path(), "fonts", "ttf")


_FONT_CACHE = {}


def _font(name: str, size: int) -> ImageFont.FreeTypeFont:
    key = (name, size)
    if key not in _FONT_CACHE:
        _FONT_CACHE[key] = ImageFont.truetype(os.path.join(_font_dir(), name), size)
    return _FONT_CACHE[key]


def render_digit(digit: int, style: DomainStyle, rng: np.random.Generator,
                 size: int = 28) -> np.ndarray:
    """One white-on-black digit image with per-sample style jitter."""
    canvas = size * 2
    font = _font(style.fonts[rng.integers(len(style.fonts))],
                 int(rng.integers(int(size * 0.80), int(size * 1.05))))
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
    x = (canvas - (right - left)) / 2 - left + rng.integers(-2, 3)
    y = (canvas - (bottom - top)) / 2 - top + rng.integers(-2, 3)
    fg = int(255 * rng.uniform(*style.contrast))
    draw.text((x, y), str(digit), fill=fg, font=font)
    img = img.rotate(rng.uniform(-10.0, 10.0), resample=Image.BILINEAR)
    blur = rng.uniform(*style.blur)
    if blur > 0:
        img = img.filter(ImageFilter.GaussianBlur(blur))
    lo = (canvas - size) // 2
    img = img.crop((lo, lo, lo + size, lo + size))
    out = np.asarray(img, dtype=np.float64)
    sigma = rng.uniform(*style.noise)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, out.shape)
    return np.clip(out, 0, 255).astype(np.uint8)


def render_domain(name: str, classes, n_per_class: int, seed: int,
                  size: int = 28, split: str = "train") -> DomainDataset:
    """A balanced rendered dataset for one domain; class k renders digit classes[k]."""
    style = STYLES[name]
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, digit in enumerate(classes):
        for _ in range(n_per_class):
            images.append(render_digit(int(digit), style, rng, size))
            labels.append(label)
    order = rng.permutation(len(images))
    return DomainDataset(domain=name, split=split,
                         images=np.stack(images)[order],
                         labels=np.asarray(labels, dtype=np.int64)[order],
                         class_names=tuple(str(d) for d in classes))


def make_transfer_pair(seed: int = 0, n_train: int = 300, n_test: int = 80,
                       classes=range(10), size: int = 28) -> dict:
    """Render a print -> script transfer task.

    Returns source train/test and target train/test datasets. Target labels are
    kept for evaluation only; adaptation must not look at them.
    """
    classes = tuple(classes)
    return {
        "source_train": render_domain("print", classes, n_train, seed * 4 + 1, size, "train"),
        "source_test": render_domain("print", classes, n_test, seed * 4 + 2, size, "test"),
        "target_train": render_domain("script", classes, n_train, seed * 4 + 3, size, "train"),
        "target_test": render_domain("script", classes, n_test, seed * 4 + 4, size, "test"),
    }


def make_pda_pair(seed: int = 0, n_train: int = 120, n_target: int = 90,
                  source_classes=(0, 1, 2, 3, 4, 5), target_classes=(0, 1, 2),
                  size: int = 28) -> dict:
    """Partial-set toy: the target covers a strict subset of the source classes.

    Target labels stay indexed in the source label space.
    """
    if not set(target_classes) <= set(source_classes):
        raise ValueError("target classes must be a subset of source classes")
    src = render_domain("print", source_classes, n_train, seed * 4 + 1, size, "train")
    src_test = render_domain("print", source_classes, n_train // 3, seed * 4 + 2, size, "test")
    tgt = render_domain("script", target_classes, n_target, seed * 4 + 3, size, "train")
    remap = {k: list(source_classes).index(c) for k, c in enumerate(target_classes)}
    tgt.labels = np.asarray([remap[int(y)] for y in tgt.labels], dtype=np.int64)
    tgt.class_names = src.class_names
    return {"source_train": src, "source_test": src_test, "target": tgt}
