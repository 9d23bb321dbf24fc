import copy
import csv

import numpy as np
import pytest
import torch

from sfda import losses
from sfda.core import AdaptationConfig, build_sgd, seed_everything
from sfda.data_io import DomainDataset, default_transform, split_source
from sfda.networks import build_model
from sfda.source_training import accuracy, collect_predictions, train_source
from sfda.synthetic import render_domain


def test_split_source_sizes_and_determinism():
    labels = np.repeat(np.arange(5), 20)
    data = DomainDataset(domain="d", split="full",
                         images=np.zeros((100, 8, 8), dtype=np.uint8), labels=labels)
    train, val = split_source(data, 0.9, seed=3)
    assert len(train) == 90 and len(val) == 10
    train2, val2 = split_source(data, 0.9, seed=3)
    assert np.array_equal(train.labels, train2.labels)
    assert np.array_equal(val.images, val2.images)
    # stratified: every class appears in both splits
    assert set(train.labels.tolist()) == set(range(5))
    assert set(val.labels.tolist()) == set(range(5))


def test_split_source_partition():
    labels = np.repeat(np.arange(4), 7)
    images = np.arange(28, dtype=np.uint8).reshape(28, 1, 1) * np.ones((28, 4, 4), np.uint8)
    data = DomainDataset(domain="d", split="full", images=images, labels=labels)
    train, val = split_source(data, 0.75, seed=0)
    ids = sorted(np.concatenate([train.images[:, 0, 0], val.images[:, 0, 0]]).tolist())
    assert ids == list(range(28))


def test_split_source_tiny_class_falls_back():
    labels = np.array([0, 0, 0, 0, 1])
    data = DomainDataset(domain="d", split="full",
                         images=np.zeros((5, 4, 4), dtype=np.uint8), labels=labels)
    with pytest.warns(UserWarning, match="unstratified"):
        train, val = split_source(data, 0.8, seed=0)
    assert len(train) + len(val) == 5


def test_split_source_validation():
    data = DomainDataset(domain="d", split="full",
                         images=np.zeros((4, 4, 4), dtype=np.uint8),
                         labels=np.array([0, 0, 1, 1]))
    with pytest.raises(ValueError):
        split_source(data, 1.5, 0)
    with pytest.raises(ValueError):
        split_source(data.relabeled(None), 0.9, 0)


def test_train_source_reaches_separable_optimum():
    """On a cleanly separable 2-class task, validation accuracy hits 100%."""
    data = render_domain("print", (0, 1), 60, seed=1)
    val = render_domain("print", (0, 1), 20, seed=2, split="test")
    cfg = AdaptationConfig.for_digits(source_epochs=4)
    model = train_source(data, cfg, val_data=val, seed=2019)
    assert model.best_val_accuracy == 100.0


def test_best_checkpoint_beats_final(tiny_pair, tiny_cfg, tmp_path):
    log = tmp_path / "log.csv"
    model = train_source(tiny_pair["source_train"], tiny_cfg,
                         val_data=tiny_pair["source_test"], seed=2020, log_path=log)
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == tiny_cfg.source_epochs
    final_acc = float(rows[-1]["val_accuracy"])
    assert model.best_val_accuracy >= final_acc
    returned = accuracy(collect_predictions(model, tiny_pair["source_test"], tiny_cfg),
                        tiny_pair["source_test"].labels)
    assert returned == pytest.approx(model.best_val_accuracy, abs=1e-6)


def test_smoothing_caps_train_confidence(tiny_pair, tiny_cfg):
    """With smoothing 0.1 the optimum is the smoothed target, so mean max
    probability stays below 1 - alpha*(K-1)/K + eps."""
    cfg = tiny_cfg.replace(source_epochs=8)
    model = train_source(tiny_pair["source_train"], cfg,
                         val_data=tiny_pair["source_test"], seed=2019)
    probs = collect_predictions(model, tiny_pair["source_train"], cfg)
    k = probs.shape[1]
    ceiling = 1.0 - cfg.alpha_ls * (k - 1) / k
    assert probs.max(dim=1).values.mean().item() < ceiling + 0.02


def test_descent_on_fixed_batch(tiny_pair):
    """Five small-LR steps on one batch never increase the loss."""
    seed_everything(0)
    cfg = AdaptationConfig.for_digits(eta0=1e-3)
    model = build_model(4, cfg)
    model.train()
    tf = default_transform(tiny_pair["source_train"])
    x = tf.batch(tiny_pair["source_train"].images[:64])
    y = torch.from_numpy(tiny_pair["source_train"].labels[:64])
    opt = build_sgd(model.param_groups(), cfg.replace(momentum=0.0))
    torch.manual_seed(0)
    prev = None
    for _ in range(5):
        opt.zero_grad()
        torch.manual_seed(0)  # freeze dropout masks so the comparison is exact
        loss = losses.cross_entropy_smoothed(model(x), y, cfg.alpha_ls)
        if prev is not None:
            assert loss.item() <= prev + 1e-7
        prev = loss.item()
        loss.backward()
        opt.step()


def test_divergence_aborts_with_last_finite(tiny_pair, tiny_cfg, monkeypatch):
    calls = {"n": 0}
    real = losses.cross_entropy_smoothed

    def poisoned(logits, labels, alpha=0.0):
        calls["n"] += 1
        if calls["n"] > 3:
            return torch.tensor(float("nan"), requires_grad=True)
        return real(logits, labels, alpha)

    import sfda.source_training as st

    monkeypatch.setattr(st.losses, "cross_entropy_smoothed", poisoned)
    with pytest.warns(UserWarning, match="non-finite"):
        model = train_source(tiny_pair["source_train"], tiny_cfg,
                             val_data=tiny_pair["source_test"], seed=2019)
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_rerun_same_seed_identical(tiny_pair):
    cfg = AdaptationConfig.for_digits(source_epochs=1)
    m1 = train_source(tiny_pair["source_train"], cfg,
                      val_data=tiny_pair["source_test"], seed=7)
    m2 = train_source(tiny_pair["source_train"], cfg,
                      val_data=tiny_pair["source_test"], seed=7)
    assert m1.best_val_accuracy == m2.best_val_accuracy
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)


def test_unlabeled_source_rejected(tiny_pair, tiny_cfg):
    with pytest.raises(ValueError):
        train_source(tiny_pair["source_train"].relabeled(None), tiny_cfg)
