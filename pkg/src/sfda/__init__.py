"""Source-free domain adaptation toolkit.

Train a source hypothesis, adapt only the feature encoder to an unlabeled
target domain (information maximization + centroid pseudo-labels + relative
rotation), then refine predictions with entropy-split semi-supervised
learning. Also covers multi-source, partial-set, and semi-supervised
variants of the problem.
"""

from .core import AdaptationConfig, ConfigError, LabelSpace, load_config, save_config
from .data_io import DomainDataset, load_digits, load_image_folder, target_eval_split
from .hypothesis_transfer import adapt_shot
from .labeling_transfer import apply_to_predictions, class_balanced_split, split_fraction
from .networks import ModelBundle, build_model, load_checkpoint, save_checkpoint
from .pseudo_label import self_supervised_pseudo_labels
from .scenarios import msda_fuse, msda_pipeline, pda_configure, ssda_adapt
from .source_training import split_source, train_source

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "ConfigError", "LabelSpace", "load_config", "save_config",
    "DomainDataset", "load_digits", "load_image_folder", "target_eval_split",
    "adapt_shot", "apply_to_predictions", "class_balanced_split", "split_fraction",
    "ModelBundle", "build_model", "load_checkpoint", "save_checkpoint",
    "self_supervised_pseudo_labels",
    "msda_fuse", "msda_pipeline", "pda_configure", "ssda_adapt",
    "split_source", "train_source",
]
