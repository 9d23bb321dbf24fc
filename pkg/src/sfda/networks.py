"""Model architecture: feature encoders, the norm-constrained classifier, and
the bundle tying them together with an optional rotation head."""

import math
import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import AdaptationConfig


class WeightNormClassifier(nn.Module):
    """Linear classifier whose weight rows are norm-constrained.

    mode "shared": w_i = s * v_i / ||v_i|| with one learnable scale s, so every
    row keeps exactly the same norm after any optimizer step.
    mode "per_row": w_i = g_i * v_i / ||v_i|| with per-row learnable magnitudes
    (the classical weight-normalization parameterization).
    """

    def __init__(self, in_dim: int, num_classes: int, mode: str = "shared"):
        super().__init__()
        if mode not in ("shared", "per_row"):
            raise ValueError("mode must be 'shared' or 'per_row'")
        self.mode = mode
        self.in_dim = in_dim
        self.num_classes = num_classes
        direction = torch.empty(num_classes, in_dim)
        nn.init.kaiming_uniform_(direction, a=math.sqrt(5))
        self.direction = nn.Parameter(direction)
        row_norms = direction.norm(dim=1)
        if mode == "shared":
            self.scale = nn.Parameter(row_norms.mean().clone())
        else:
            self.scale = nn.Parameter(row_norms.clone())
        bound = 1.0 / math.sqrt(in_dim)
        self.bias = nn.Parameter(torch.empty(num_classes).uniform_(-bound, bound))

    @property
    def weight(self) -> torch.Tensor:
        unit = F.normalize(self.direction, dim=1)
        if self.mode == "shared":
            return self.scale * unit
        return self.scale.unsqueeze(1) * unit

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


class FeatureBottleneck(nn.Module):
    """FC projection to the shared feature width, ending in batch normalization."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.fc(x))


class LeNetBackbone(nn.Module):
    """Classical LeNet-style convnet for 28x28 grayscale digits."""

    out_dim = 500

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 20, kernel_size=5)
        self.conv2 = nn.Conv2d(20, 50, kernel_size=5)
        self.drop = nn.Dropout2d(0.5)
        self.fc = nn.Linear(50 * 4 * 4, 500)

    def forward(self, x):
        x = F.relu(F.max_pool2d(self.conv1(x), 2))
        x = F.relu(F.max_pool2d(self.drop(self.conv2(x)), 2))
        x = x.flatten(1)
        return F.relu(self.fc(x))


class Conv32Backbone(nn.Module):
    """Wider convnet for 32x32 grayscale digits (street-number transfer)."""

    out_dim = 512

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 64, 5, padding=2), nn.BatchNorm2d(64), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 5, padding=2), nn.BatchNorm2d(128), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(128, 256, 5, padding=2), nn.BatchNorm2d(256), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.fc = nn.Linear(256 * 4 * 4, 512)
        self.fc_bn = nn.BatchNorm1d(512)

    def forward(self, x):
        x = self.features(x).flatten(1)
        return F.relu(self.fc_bn(self.fc(x)))


class ResNetBackbone(nn.Module):
    """torchvision ResNet trunk without its FC head."""

    def __init__(self, depth: int = 50, pretrained: bool = True):
        super().__init__()
        from torchvision import models

        factory = {18: models.resnet18, 50: models.resnet50, 101: models.resnet101}[depth]
        weights = None
        if pretrained:
            try:
                weights = {18: models.ResNet18_Weights, 50: models.ResNet50_Weights,
                           101: models.ResNet101_Weights}[depth].IMAGENET1K_V1
                net = factory(weights=weights)
            except Exception as exc:  # offline: fall back to random init
                warnings.warn(f"could not load pretrained weights ({exc}); using random init")
                weights = None
                net = factory(weights=None)
        else:
            net = factory(weights=None)
        self.pretrained = weights is not None
        self.out_dim = net.fc.in_features
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


class FeatureEncoder(nn.Module):
    """Backbone followed by the bottleneck; output dimension is the shared d."""

    def __init__(self, backbone: nn.Module, bottleneck_dim: int, pretrained_backbone: bool = False):
        super().__init__()
        self.backbone = backbone
        self.bottleneck = FeatureBottleneck(backbone.out_dim, bottleneck_dim)
        self.out_dim = bottleneck_dim
        self.pretrained_backbone = pretrained_backbone

    def forward(self, x):
        return self.bottleneck(self.backbone(x))


class RotationHead(nn.Module):
    """Linear 4-way head over the concatenated (original, rotated) features."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.fc = nn.Linear(2 * feature_dim, 4)

    def forward(self, feats: torch.Tensor, rotated_feats: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.cat([feats, rotated_feats], dim=1))


class ModelBundle(nn.Module):
    """encoder g, classifier h, and an optional rotation head h_c.

    The full predictor f is classifier(encoder(x)); the rotation head is a
    training-time auxiliary, never used at inference.
    """

    def __init__(self, encoder: FeatureEncoder, classifier: WeightNormClassifier,
                 rotation_head: RotationHead | None = None, arch: str = "custom"):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier
        self.rotation_head = rotation_head
        self.arch = arch
        self.classifier_digest = None

    @property
    def feature_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.encoder(x))

    def attach_rotation_head(self) -> "ModelBundle":
        if self.rotation_head is None:
            self.rotation_head = RotationHead(self.feature_dim)
        return self

    def param_groups(self, include_classifier: bool = True):
        """(params, lr_mult) pairs: pretrained backbone at 0.1x, new layers at 1x."""
        backbone_mult = 0.1 if self.encoder.pretrained_backbone else 1.0
        groups = [(list(self.encoder.backbone.parameters()), backbone_mult),
                  (list(self.encoder.bottleneck.parameters()), 1.0)]
        if include_classifier:
            groups.append((list(self.classifier.parameters()), 1.0))
        if self.rotation_head is not None:
            groups.append((list(self.rotation_head.parameters()), 1.0))
        return groups


ARCHS = ("lenet", "dtn", "resnet18", "resnet50", "resnet101")


def build_model(num_classes: int, cfg: AdaptationConfig) -> ModelBundle:
    arch = cfg.arch
    if arch == "lenet":
        backbone, pretrained = LeNetBackbone(), False
    elif arch == "dtn":
        backbone, pretrained = Conv32Backbone(), False
    elif arch.startswith("resnet"):
        backbone = ResNetBackbone(int(arch[len("resnet"):]), pretrained=cfg.pretrained_backbone)
        pretrained = backbone.pretrained
    else:
        raise ValueError(f"unknown arch '{arch}' (expected one of {ARCHS})")
    encoder = FeatureEncoder(backbone, cfg.bottleneck_dim, pretrained_backbone=pretrained)
    classifier = WeightNormClassifier(cfg.bottleneck_dim, num_classes, mode=cfg.classifier_norm)
    return ModelBundle(encoder, classifier, arch=arch)


def save_checkpoint(bundle: ModelBundle, cfg: AdaptationConfig, path, **extra) -> None:
    payload = {
        "arch": bundle.arch,
        "num_classes": bundle.num_classes,
        "bottleneck_dim": bundle.feature_dim,
        "classifier_norm": bundle.classifier.mode,
        "has_rotation_head": bundle.rotation_head is not None,
        "state_dict": bundle.state_dict(),
        "config": {"image_size": cfg.image_size},
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, pretrained_backbone: bool = False) -> tuple[ModelBundle, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = AdaptationConfig(arch=payload["arch"], bottleneck_dim=payload["bottleneck_dim"],
                           classifier_norm=payload["classifier_norm"],
                           pretrained_backbone=pretrained_backbone)
    bundle = build_model(payload["num_classes"], cfg)
    if payload["has_rotation_head"]:
        bundle.attach_rotation_head()
    bundle.load_state_dict(payload["state_dict"])
    return bundle, payload
