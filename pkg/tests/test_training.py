import numpy as np
import pytest

from src.config import TrainConfig
from src.cvcnn import build_model, infer
from src.exceptions import DomainError, ShapeMismatchError, TrainingDivergedError
from src.models import AberrationFunction, RealignedPatch
from src.training import (HISTORY_COLUMNS, Trainer, l2_penalty, latest_checkpoint, load_model, read_manifest,
                          train)

from tests.conftest import random_complex

DIMS = (3, 8, 9, 16)


def make_samples(count, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for index in range(count):
        patch = RealignedPatch(data=random_complex(rng, DIMS), track_ref=index, center_positions=np.zeros((8, 2)))
        ab = AberrationFunction.from_amplitude_phase(rng.uniform(0.5, 1.0, 16), rng.uniform(-1, 1, 16))
        samples.append((patch, ab))
    return samples


def params_of(model):
    return {name: p.copy() for name, p, _ in model.named_parameters()}


def test_zero_learning_rate_leaves_parameters(tmp_path):
    model = build_model("desk", seed=0, dropout_p=0.0)
    before = params_of(model)
    cfg = TrainConfig(epochs=2, batch_size=4, lr0=0.0, l2_alpha=0.0, dropout_p=0.0)
    _, history = train(model, make_samples(4), cfg, val_set=make_samples(2, seed=1))
    for name, value in params_of(model).items():
        np.testing.assert_array_equal(value, before[name])
    assert list(history.columns) == HISTORY_COLUMNS
    assert history["epoch"].tolist() == [0, 1]
    assert (history["lr"] == 0).all()
    assert np.all(np.isfinite(history["val_loss"]))


def test_learning_rate_schedule():
    trainer = Trainer(build_model("desk", seed=0), TrainConfig(lr0=1e-3, lr_decay=0.5))
    assert trainer.learning_rate(0) == pytest.approx(1e-3)
    assert trainer.learning_rate(3) == pytest.approx(1.25e-4)


def test_validation_loss_is_nan_without_validation_set():
    cfg = TrainConfig(epochs=1, batch_size=2, dropout_p=0.0)
    _, history = train(build_model("desk", seed=0, dropout_p=0.0), make_samples(2), cfg)
    assert np.isnan(history["val_loss"].iloc[0])
    assert np.isfinite(history["train_loss"].iloc[0])


def test_l2_penalty_value_and_gradient():
    model = build_model("desk", seed=2)
    model.zero_grad()
    alpha = 1e-3
    expected = alpha * sum(float(np.sum(np.abs(p) ** 2)) for _, p, _ in model.named_parameters())
    assert l2_penalty(model, alpha) == pytest.approx(expected)
    for _, param, grad in model.named_parameters():
        np.testing.assert_allclose(grad, 2 * alpha * param)


def test_checkpoints_are_numbered_by_completed_epochs(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, dropout_p=0.2)
    train(build_model("desk", seed=0), make_samples(4), cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0001", "epoch_0002"]
    manifest = read_manifest(latest_checkpoint(tmp_path))
    assert manifest["epoch"] == 2
    assert manifest["scale"] == "desk"
    assert len(manifest["history"]) == 2


def test_resumed_training_is_bit_identical(tmp_path):
    samples = make_samples(6)
    cfg = TrainConfig(epochs=3, batch_size=3, lr0=1e-3, dropout_p=0.2, rng_seed=5)

    straight, straight_history = train(build_model("desk", seed=1, dropout_p=0.2), samples, cfg,
                                       checkpoint_dir=tmp_path / "straight")

    partial_cfg = TrainConfig(epochs=1, batch_size=3, lr0=1e-3, dropout_p=0.2, rng_seed=5)
    train(build_model("desk", seed=1, dropout_p=0.2), samples, partial_cfg, checkpoint_dir=tmp_path / "resumed")
    resumed, resumed_history = train(build_model("desk", seed=1, dropout_p=0.2), samples, cfg,
                                     checkpoint_dir=tmp_path / "resumed")

    for name, value in params_of(straight).items():
        np.testing.assert_array_equal(params_of(resumed)[name], value, err_msg=name)
    np.testing.assert_array_equal(resumed_history["train_loss"], straight_history["train_loss"])


def test_load_model_reproduces_inference(tmp_path):
    samples = make_samples(4)
    model, _ = train(build_model("desk", seed=0), samples, TrainConfig(epochs=1, batch_size=2),
                     checkpoint_dir=tmp_path)
    restored = load_model(tmp_path)
    patch = samples[0][0]
    np.testing.assert_array_equal(infer(restored, patch).values, infer(model, patch).values)
    assert not restored.training


def test_load_model_without_checkpoint(tmp_path):
    with pytest.raises(DomainError):
        load_model(tmp_path)


def test_non_finite_loss_raises():
    model = build_model("desk", seed=0, dropout_p=0.0)
    model.layers[-1][1].params["bias"][0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(model, make_samples(2), TrainConfig(epochs=1, batch_size=2))
    assert info.value.epoch == 0 and info.value.step == 0
    assert "parameter_norm" in info.value.diagnostics


def test_dataset_shape_is_checked():
    model = build_model("desk", seed=0)
    bad = [(RealignedPatch(data=np.ones((3, 8, 7, 16)), track_ref=0, center_positions=np.zeros((8, 2))),
            AberrationFunction.identity(16))]
    with pytest.raises(ShapeMismatchError):
        train(model, bad, TrainConfig(epochs=1))
    with pytest.raises(DomainError):
        train(model, [], TrainConfig(epochs=1))


@pytest.mark.slow
def test_overfits_a_small_set():
    samples = make_samples(4)
    cfg = TrainConfig(epochs=150, batch_size=4, lr0=2e-3, lr_decay=1.0, l2_alpha=0.0, dropout_p=0.0)
    _, history = train(build_model("desk", seed=0, dropout_p=0.0), samples, cfg)
    assert history["train_loss"].iloc[-1] < 0.1 * history["train_loss"].iloc[0]
