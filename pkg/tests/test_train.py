import math

import numpy as np
import pytest

from morphnas.data import DatasetSplit, make_initial_model
from morphnas.train import (
    TrainConfig, TrainingDiverged, cosine_lr, epoch_budget, evaluate, sgdr_train,
)


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 10, 0.05, 0.0) == pytest.approx(0.05, abs=1e-12)
    assert cosine_lr(10, 10, 0.05, 0.0) == 0.0
    assert cosine_lr(5, 10, 0.05, 0.0) == pytest.approx(0.025, abs=1e-12)


def test_cosine_monotone_non_increasing():
    lrs = [cosine_lr(t, 97, 0.05, 0.001) for t in range(98)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 0.001


@pytest.mark.parametrize("t,total", [(-1, 10), (11, 10), (0, 0)])
def test_cosine_rejects_bad_progress(t, total):
    with pytest.raises(ValueError):
        cosine_lr(t, total, 0.05, 0.0)


def test_epoch_budget_examples():
    b = epoch_budget(n_steps=5, n_neigh=1, epoch_neigh=17, epoch_final=100, epoch_pretrain=20)
    assert b.lineage == 205
    assert b.total == 205
    b = epoch_budget(5, 8, 17, 100, 20)
    assert b.total == 20 + 17 * 8 * 5 + 100
    assert b.lineage == 205
    assert epoch_budget(0, 8, 17, 0).total == 0


def test_epoch_budget_rejects_negative():
    with pytest.raises(ValueError):
        epoch_budget(-1, 8, 17, 100)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=0.01, lr_end=0.05)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _weights(g):
    return {(n, k): w.copy() for n, k, w in g.parameters()}


def test_zero_lr_leaves_weights_unchanged(model, small_data):
    before = _weights(model)
    sgdr_train(model, small_data.train, TrainConfig(epochs=1, lr_start=0.0, lr_end=0.0))
    after = _weights(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic(pretrained, small_data):
    a, b = pretrained.clone(), pretrained.clone()
    cfg = TrainConfig(epochs=1, seed=5)
    sgdr_train(a, small_data.train, cfg)
    sgdr_train(b, small_data.train, cfg)
    wa, wb = _weights(a), _weights(b)
    assert all(np.array_equal(wa[k], wb[k]) for k in wa)


def test_loss_decreases_on_separable_task():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(2), 64)
    imgs = rng.normal(0, 0.3, (128, 3, 8, 8)).astype(np.float32)
    imgs[labels == 1, 0] += 1.5
    split = DatasetSplit(imgs, labels, num_classes=2)
    g = make_initial_model((3, 8, 8), num_classes=2, channels=4, seed=0)
    _, rep = sgdr_train(g, split, TrainConfig(epochs=6, batch_size=16, seed=0))
    assert rep.train_loss[-1] < rep.train_loss[0]
    assert evaluate(g, split)[1] > 0.95


def test_report_shape_and_csv(model, small_data):
    _, rep = sgdr_train(model, small_data.train, TrainConfig(epochs=3, track_val=True), small_data.val)
    assert rep.epochs_consumed == 3
    assert len(rep.train_loss) == len(rep.val_acc) == 3
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,val_acc"
    assert len(lines) == 4
    # per-batch annealing ends the cycle just above lr_end
    assert rep.lr[-1] < 0.01


def test_constant_schedule(model, small_data):
    _, rep = sgdr_train(model, small_data.train, TrainConfig(epochs=2, lr_start=0.01, lr_end=0.01))
    assert rep.lr == [0.01, 0.01]


def test_divergence_raises(model, small_data):
    # after the last relu, so the NaN reaches the loss
    dense = next(n for n in model.nodes.values() if n.kind == "Dense")
    dense.params["weight"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        sgdr_train(model, small_data.train, TrainConfig(epochs=1))


def test_evaluate_perfect_and_uniform(model, small_data):
    split = small_data.val
    dense = next(n for n in model.nodes.values() if n.kind == "Dense")
    dense.params["weight"][...] = 0
    dense.params["bias"][...] = 0
    loss, acc = evaluate(model, split)
    assert loss == pytest.approx(math.log(10), rel=1e-5)
    # all-equal probabilities: argmax picks class 0
    assert acc == pytest.approx(np.mean(split.labels == 0))
    dense.params["bias"][...] = 0
    dense.params["bias"][3] = 50.0
    only3 = split.subset(np.flatnonzero(split.labels == 3))
    assert evaluate(model, only3)[1] == 1.0


def test_evaluate_empty_split_rejected(model):
    class Empty:
        images = np.zeros((0, 3, 16, 16), np.float32)
        labels = np.zeros(0, np.int64)

        def __len__(self):
            return 0

    with pytest.raises(ValueError):
        evaluate(model, Empty())
