"""Shared domain types, configuration, and optimizer plumbing."""

import dataclasses
import hashlib
import os
import random
from dataclasses import dataclass, field

import numpy as np
import torch

DATA_ROOT_ENV = "SFDA_DATA_ROOT"

SCENARIOS = ("closed", "partial", "multi-source", "semi-supervised")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    """The K-way classification task: class count and ordered class names."""

    class_names: tuple

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("need at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @staticmethod
    def digits(k: int = 10) -> "LabelSpace":
        return LabelSpace(tuple(str(i) for i in range(k)))


@dataclass
class AdaptationConfig:
    """Every tunable scalar of the pipeline, with the standard defaults.

    Weights: alpha_ls is the label-smoothing amount, beta the diversity weight,
    gamma1 / gamma2 the pseudo-label and rotation weights, t_c the minimum
    centroid size kept in the partial-set scenario.
    """

    alpha_ls: float = 0.1
    beta: float = 1.0
    gamma1: float = 0.3
    gamma2: float = 0.6
    t_c: int = 10
    # optimizer
    eta0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    source_epochs: int = 30
    adapt_epochs: int = 15
    # semi-supervised refinement stage
    mm_alpha: float = 0.75
    mm_augment_count: int = 2
    mm_temperature: float = 0.5
    mm_lambda_u: float = 75.0
    mm_init_encoder: bool = True
    # model
    arch: str = "lenet"
    bottleneck_dim: int = 256
    classifier_norm: str = "shared"  # "shared" scale or "per_row" magnitudes
    image_size: int = 28
    pretrained_backbone: bool = True
    rotation_pad: str = "none"  # "none" rejects non-square inputs; "zero" pads
    # scenario
    scenario: str = "closed"
    ssda_shots: int = 1
    seeds: tuple = (2019, 2020, 2021)
    # task naming; resolvable dataset names or folder names under the data root
    source: str = ""
    target: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("alpha_ls", "beta", "gamma1", "gamma2", "eta0", "mm_alpha", "mm_lambda_u"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha_ls < 1.0:
            raise ConfigError("alpha_ls must lie in [0, 1)")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario '{self.scenario}'")
        if self.classifier_norm not in ("shared", "per_row"):
            raise ConfigError("classifier_norm must be 'shared' or 'per_row'")
        if self.scenario == "partial":
            self.beta = 0.0

    def replace(self, **kwargs) -> "AdaptationConfig":
        return dataclasses.replace(self, **kwargs)

    @staticmethod
    def for_digits(**overrides) -> "AdaptationConfig":
        """Digit-task defaults: lighter self-supervision weights, mild mixup."""
        base = dict(gamma1=0.1, gamma2=0.2, mm_alpha=0.1, mm_lambda_u=25.0,
                    source_epochs=30, arch="lenet", image_size=28)
        base.update(overrides)
        return AdaptationConfig(**base)

    @staticmethod
    def for_objects(**overrides) -> "AdaptationConfig":
        base = dict(gamma1=0.3, gamma2=0.6, mm_alpha=0.75, mm_lambda_u=75.0,
                    source_epochs=50, arch="resnet50", image_size=224)
        base.update(overrides)
        return AdaptationConfig(**base)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(AdaptationConfig)}


def _parse_value(name: str, raw: str):
    default = getattr(AdaptationConfig(), name)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key '{name}' expects a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw.strip()


def load_config(path) -> AdaptationConfig:
    """Read a flat `key = value` text file whose keys mirror AdaptationConfig."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            values[key] = _parse_value(key, raw)
    return AdaptationConfig(**values)


def save_config(cfg: AdaptationConfig, path) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def data_root(default: str | None = None) -> str:
    root = os.environ.get(DATA_ROOT_ENV, default)
    if root is None:
        raise ConfigError(f"set the {DATA_ROOT_ENV} environment variable to the dataset root")
    return root


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def lr_schedule(eta0: float, p: float) -> float:
    """Polynomial decay eta0 * (1 + 10 p)^-0.75 over training progress p in [0, 1]."""
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    if not 0.0 <= p <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return eta0 * (1.0 + 10.0 * p) ** (-0.75)


def build_sgd(param_groups, cfg: AdaptationConfig) -> torch.optim.SGD:
    """SGD over (params, lr_mult) groups; lr_mult 1.0 for newly added layers,
    0.1 for pretrained backbone layers so new layers train 10x faster."""
    groups = []
    for params, lr_mult in param_groups:
        params = [p for p in params if p.requires_grad]
        if not params:
            continue
        groups.append({"params": params, "lr": cfg.eta0 * lr_mult, "lr_mult": lr_mult})
    if not groups:
        raise ValueError("no trainable parameters")
    return torch.optim.SGD(groups, lr=cfg.eta0, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def set_progress(optimizer: torch.optim.Optimizer, eta0: float, p: float) -> float:
    """Apply the decayed learning rate to every group, honoring its lr_mult."""
    lr = lr_schedule(eta0, p)
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_mult", 1.0)
    return lr


def state_digest(module: torch.nn.Module) -> str:
    """Content digest of a module's parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze_classifier(model) -> "object":
    """Exclude the classifier from gradient updates and record its digest."""
    for p in model.classifier.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("classifier has non-finite weights")
        p.requires_grad_(False)
    model.classifier_digest = state_digest(model.classifier)
    return model
