import numpy as np
import pytest
import torch

from sfda.core import AdaptationConfig
from sfda.source_training import train_source
from sfda.synthetic import make_transfer_pair


@pytest.fixture(scope="session")
def tiny_pair():
    """4-class print/script task, small enough for second-scale training."""
    return make_transfer_pair(seed=7, n_train=40, n_test=20, classes=range(4))


@pytest.fixture(scope="session")
def tiny_cfg():
    return AdaptationConfig.for_digits(source_epochs=3, adapt_epochs=2)


@pytest.fixture(scope="session")
def tiny_source_model(tiny_pair, tiny_cfg):
    """Shared source model; tests must copy it before mutating."""
    return train_source(tiny_pair["source_train"], tiny_cfg,
                        val_data=tiny_pair["source_test"], seed=2019)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_probs(rng, n, k):
    p = rng.random((n, k)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
