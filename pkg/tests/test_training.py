import numpy as np
import pytest

from stealthbfa.data import LabeledDataset, synthetic_blobs
from stealthbfa.metrics import accuracy
from stealthbfa.models import Dense, ReLU, build_model, make_model
from stealthbfa.tensor import ContractError
from stealthbfa.training import TrainConfig, TrainingError, adversarial_train, pgd_perturb, train


def blobs_model(features=4, classes=2, seed=0):
    return make_model("lin", [Dense(features, classes)], (features,), seed=seed)


def test_separable_blobs_reach_full_accuracy():
    ds = synthetic_blobs(2, 100, 4, 0.02, seed=0)
    result = train(blobs_model(), ds, TrainConfig(epochs=20, batch_size=16, learning_rate=0.5))
    assert accuracy(result.model, ds) >= 0.99
    assert len(result.history) == 20 and result.history[-1].epoch == 20


def test_zero_epochs_leaves_model_unchanged():
    m = build_model("mlp2", seed=1)
    ds = LabeledDataset(np.random.default_rng(0).uniform(size=(8, 784)), np.arange(8))
    out = train(m, ds, TrainConfig(epochs=0))
    assert out.model.same_state(m) and out.history == []


def test_training_is_deterministic():
    ds = synthetic_blobs(3, 40, 6, 0.2, seed=2)
    m = make_model("mlp", [Dense(6, 8), ReLU(), Dense(8, 3)], (6,), seed=2)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
    a = train(m, ds, cfg)
    b = train(m, ds, cfg)
    assert a.model.same_state(b.model)
    assert a.history == b.history
    c = train(m, ds, TrainConfig(epochs=3, batch_size=8, seed=6))
    assert not a.model.same_state(c.model)


def test_adv_fraction_zero_is_plain_training():
    ds = synthetic_blobs(3, 30, 5, 0.2, seed=3)
    m = make_model("mlp", [Dense(5, 6), ReLU(), Dense(6, 3)], (5,), seed=3)
    plain = train(m, ds, TrainConfig(epochs=2, batch_size=10))
    adv = adversarial_train(m, ds, TrainConfig(epochs=2, batch_size=10, adv_fraction=0.0, adv_epsilon=0.3))
    assert plain.model.same_state(adv.model)


def test_adv_epsilon_zero_matches_plain_training():
    ds = synthetic_blobs(3, 30, 5, 0.2, seed=3)
    m = make_model("mlp", [Dense(5, 6), ReLU(), Dense(6, 3)], (5,), seed=3)
    plain = train(m, ds, TrainConfig(epochs=2, batch_size=10))
    adv = adversarial_train(m, ds, TrainConfig(epochs=2, batch_size=10, adv_fraction=0.5, adv_epsilon=0.0))
    assert plain.model.same_state(adv.model)


def test_pgd_stays_in_box_and_ball():
    m = build_model("mlp2", seed=4)
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(16, 784))
    x[:, :50] = 0.0
    x[:, 50:100] = 1.0
    y = rng.integers(0, 10, 16)
    eps = 0.05
    adv = pgd_perturb(m, m.param_tensors(), x, y, eps, 0.02, 5)
    assert np.abs(adv - x).max() <= eps + 1e-12
    assert adv.min() >= 0 and adv.max() <= 1
    assert np.abs(adv - x).max() > 0


def test_pgd_increases_loss():
    from stealthbfa.metrics import mean_loss

    ds = synthetic_blobs(3, 20, 5, 0.1, seed=6)
    m = train(make_model("mlp", [Dense(5, 8), ReLU(), Dense(8, 3)], (5,), seed=6), ds, TrainConfig(epochs=5, batch_size=8)).model
    adv = pgd_perturb(m, m.param_tensors(), ds.inputs, ds.labels, 0.1, 0.02, 10)
    assert mean_loss(m, LabeledDataset(adv, ds.labels)) > mean_loss(m, ds)


def test_consistency_term_changes_training():
    ds = synthetic_blobs(3, 30, 5, 0.2, seed=7)
    m = make_model("mlp", [Dense(5, 6), ReLU(), Dense(6, 3)], (5,), seed=7)
    base = TrainConfig(epochs=2, batch_size=10, adv_fraction=0.5, adv_epsilon=0.1, adv_steps=3, adv_step_size=0.05)
    a = adversarial_train(m, ds, base)
    b = adversarial_train(m, ds, TrainConfig(**{**base.as_dict(), "consistency_weight": 2.0}))
    assert not a.model.same_state(b.model)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = synthetic_blobs(2, 20, 3, 0.1, seed=0)
    with pytest.raises(TrainingError, match="epoch 0"):
        train(blobs_model(3), ds, TrainConfig(epochs=2, learning_rate=1e308))


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0}, {"adv_fraction": 1.5}, {"consistency_weight": -1}],
)
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


def test_history_records_curve_columns():
    ds = synthetic_blobs(2, 20, 3, 0.1, seed=1)
    out = train(blobs_model(3), ds, TrainConfig(epochs=2, batch_size=8))
    for rec in out.history:
        assert np.isfinite([rec.loss, rec.accuracy, rec.robustness]).all()
        assert 0 <= rec.accuracy <= 1 and rec.robustness >= 0
