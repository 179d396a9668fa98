import math

import numpy as np
import pytest

from spikingedn.autograd import Adam, Tensor, poly_lr
from spikingedn.events import collate, synthetic_dataset
from spikingedn.genotype import uniform_genotype
from spikingedn.network import ModelConfig, build_from_genotype
from spikingedn.training import TrainConfig, TrainingDiverged, cross_entropy_loss, sequence_loss, train


def toy_model(seed=0, **kw):
    cfg = ModelConfig(num_classes=3, stem_channels=8, node_width=4, aspp_channels=4, aspp_rates=(2, 4),
                      decoder_channels=8, seed=seed, **kw)
    return build_from_genotype(uniform_genotype([0, 1, 1], plan=(2, 2, 2, 2)), cfg)


@pytest.fixture(scope="module")
def toy_data():
    return synthetic_dataset(3, seed=11, size=32, stacks_per_scene=8, test_fraction=0)


def test_uniform_prediction_loss_is_log_c():
    labels = np.array([[[0, 1], [2, 255]]])
    assert float(cross_entropy_loss(Tensor(np.zeros((1, 3, 2, 2))), labels).data) == pytest.approx(math.log(3))


def test_confident_prediction_loss_vanishes():
    labels = np.array([[[0, 1], [1, 0]]])
    scores = np.zeros((1, 2, 2, 2))
    scores[0, 0] = np.where(labels[0] == 0, 50.0, -50.0)
    assert float(cross_entropy_loss(Tensor(scores), labels).data) < 1e-20


def test_cross_entropy_matches_per_pixel_sum(rng):
    scores = rng.normal(0, 3, (2, 4, 5, 6))
    labels = rng.integers(0, 4, (2, 5, 6))
    labels[0, 0, :3] = 255
    total, n = 0.0, 0
    for b in range(2):
        for i in range(5):
            for j in range(6):
                c = labels[b, i, j]
                if c == 255:
                    continue
                s = scores[b, :, i, j]
                total -= s[c] - math.log(sum(math.exp(v) for v in s))
                n += 1
    assert float(cross_entropy_loss(Tensor(scores), labels).data) == pytest.approx(total / n, abs=1e-6)


def test_cross_entropy_all_ignored():
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255))


def test_zero_lr_leaves_parameters(toy_data):
    model = toy_model()
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    train(model, toy_data.train, TrainConfig(epochs=1, batch_size=4, lr=0.0, precision="float64"))
    for k, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[k], err_msg=k)


def test_epoch_one_losses_are_deterministic(toy_data):
    runs = []
    for _ in range(2):
        model = toy_model(seed=4)
        h = train(model, toy_data.train, TrainConfig(epochs=1, batch_size=2, lr=3e-3, seed=9))
        runs.append(h.step_losses)
    assert runs[0] == runs[1] and len(runs[0]) == 3


def test_single_sequence_overfit(toy_data):
    model = toy_model(seed=1)
    batch = collate(toy_data.train[:1])
    opt = Adam(model.parameters(), 1e-2)
    first = None
    for _ in range(200):
        opt.zero_grad()
        loss, _ = sequence_loss(model, batch)
        value = float(loss.data)
        first = value if first is None else first
        if value < 0.1 * first:
            break
        loss.backward()
        opt.step()
        model.project()
    assert value < 0.1 * first


def test_tau_a_stays_clamped(toy_data):
    model = toy_model(placement="all", tau_a_range=(0.25, 0.35))
    seen = []
    train(model, toy_data.train[:2], TrainConfig(epochs=3, batch_size=1, lr=0.5),
          on_epoch=lambda e, h: seen.extend(float(n.tau_a.data) for _, n in model.neurons()))
    assert seen and all(0.25 <= v <= 0.35 for v in seen)


def test_poly_decay_is_monotone():
    lrs = [poly_lr(0.01, t, 50, 0.9) for t in range(51)]
    assert lrs[0] == 0.01 and lrs[-1] == 0.0
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[10] == pytest.approx(0.01 * (1 - 10 / 50) ** 0.9)


def test_history_records_validation(toy_data):
    model = toy_model()
    h = train(model, toy_data.train[:2], TrainConfig(epochs=2, batch_size=2, lr=1e-3, eval_every=1),
              val_sequences=toy_data.train[2:3])
    assert [r["split"] for r in h.records] == ["train", "val", "train", "val"]
    assert 0.0 <= h.last("val")["miou"] <= 1.0
    assert not model.training


def test_non_finite_loss_aborts_with_diagnostics(toy_data):
    model = toy_model()
    model.decoder.classifier.bias.data[0] = np.nan
    with pytest.raises(TrainingDiverged, match="rate .*stem1"):
        train(model, toy_data.train[:1], TrainConfig(epochs=1, batch_size=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(warmup=4, seq_len=4)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")
