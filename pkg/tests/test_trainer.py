import math

import numpy as np
import pytest
from pydantic import ValidationError

from sohkan.data_utils import HorizonPair, NormalizationParams, pairs_to_arrays
from sohkan.kan import Activation, KanModel, SplineGrid, init_model
from sohkan.trainer import (
    PREDICTIONS_SCHEMA,
    REPORT_SCHEMA,
    Adam,
    TrainConfig,
    TrainingDivergedError,
    evaluate_rmse,
    prediction_loss,
    save_predictions,
    save_train_report,
    total_loss,
    train,
)
from sohkan.utils import read_csv_table


GRID = SplineGrid()


def _constant_model(c1, c2, norm=None):
    return KanModel(
        a1=Activation(w_silu=0.0, coeffs=np.full(GRID.n_basis, c1), grid=GRID),
        a2=Activation(w_silu=0.0, coeffs=np.full(GRID.n_basis, c2), grid=GRID),
        norm=norm,
    )


def _pairs(targets):
    return [HorizonPair(cycle=idx, t_bar=0.5, k_bar=idx / 10, target=target) for idx, target in enumerate(targets)]


def test_prediction_loss_of_zero_model():
    inputs = [[0.2, 0.0], [0.4, 1.0]]
    assert prediction_loss(_constant_model(0.0, 0.0), inputs, [0.1, -0.3]) == pytest.approx(0.05)


def test_prediction_loss_rejects_empty_batch():
    with pytest.raises(ValueError, match="empty batch"):
        prediction_loss(_constant_model(0.0, 0.0), np.empty((0, 2)), [])


def test_total_loss_without_regularization():
    model = init_model(GRID, seed=0)
    inputs = np.array([[0.1, 0.2], [0.6, 0.9]])
    terms = total_loss(model, inputs, [0.3, 0.8])
    assert terms.total == terms.pred


def test_total_loss_terms():
    # A1 = 0.3 and A2 = 0.1 everywhere: magnitudes (0.3, 0.1), perfect prediction of 0.4
    model = _constant_model(0.3, 0.1)
    inputs = np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]])
    terms = total_loss(model, inputs, [0.4, 0.4, 0.4], lam=1.0, nu1=0.5, nu2=2.0)

    expected_entropy = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert terms.pred == pytest.approx(0.0, abs=1e-20)
    assert terms.l1 == pytest.approx(0.4)
    assert terms.entropy == pytest.approx(expected_entropy)
    assert terms.total == pytest.approx(0.5 * 0.4 + 2.0 * expected_entropy)


def test_zero_model_loss_is_zero_and_entropy_inactive(log_messages):
    terms = total_loss(_constant_model(0.0, 0.0), [[0.5, 0.5]], [0.0], lam=1.0, nu1=1.0, nu2=1.0)
    assert terms == (0.0, 0.0, 0.0, 0.0)
    assert any(message.startswith("WARNING") for message in log_messages)


@pytest.mark.parametrize("bias", [0.2, -0.05])
def test_rmse_of_constant_bias(bias):
    norm = NormalizationParams(t_min=23.0, t_max=33.0)
    pairs = _pairs([bias] * 5)
    assert evaluate_rmse(_constant_model(0.0, 0.0), pairs, norm) == pytest.approx(10.0 * abs(bias))


def test_rmse_rejects_empty_split():
    with pytest.raises(ValueError, match="empty split"):
        evaluate_rmse(_constant_model(0.0, 0.0), [], NormalizationParams(23.0, 33.0))


def test_adam_first_step_moves_by_learning_rate():
    optimizer = Adam(np.zeros(2), lr=0.1)
    params = optimizer.step(np.array([2.0, -0.5]))
    assert np.allclose(params, [-0.1, 0.1], atol=1e-8)
    assert optimizer.n_steps == 1


def test_train_config_aliases():
    config = TrainConfig.model_validate({"lambda": 0.01, "horizon_N": 50})
    assert config.lam == 0.01
    assert config.horizon_n == 50
    assert TrainConfig(lam=0.5).lam == 0.5

    defaults = TrainConfig()
    assert (defaults.lam, defaults.nu1, defaults.nu2) == (0.001, 0.12, 0.15)
    assert (defaults.steps, defaults.batch_size, defaults.learning_rate) == (400, 128, 0.01)


@pytest.mark.parametrize("kwargs", [{"bogus": 1}, {"steps": 0}, {"learning_rate": 0.0}, {"lambda": -1.0}])
def test_invalid_train_config(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig.model_validate(kwargs)


def test_train_reduces_validation_loss(small_splits):
    config = TrainConfig(steps=200, batch_size=16, seed=0)
    model = init_model(GRID, small_splits.norm, seed=0)
    trained, report = train(model, small_splits.train, small_splits.validation, config, small_splits.test)

    assert report.steps == 200
    assert len(report.val_loss) == len(report.pred_loss) == 200
    assert report.val_loss[-1] < report.initial_val_loss
    assert report.test_rmse is not None and report.test_rmse > 0
    # The initial model is left untouched
    assert np.array_equal(model.parameters(), init_model(GRID, small_splits.norm, seed=0).parameters())
    assert not np.array_equal(trained.parameters(), model.parameters())
    assert trained.norm == small_splits.norm


def test_validation_loss_trends_down_over_the_default_run(small_splits):
    _, report = train(
        init_model(GRID, small_splits.norm, seed=0), small_splits.train, small_splits.validation, TrainConfig(seed=0)
    )
    smoothed = np.convolve(report.val_loss, np.ones(10) / 10, mode="valid")
    slope = np.polyfit(np.arange(len(smoothed)), smoothed, 1)[0]

    assert slope < 0
    assert smoothed[-1] < smoothed[0]
    assert report.val_loss[-1] * 10 <= report.initial_val_loss


def test_regularization_shrinks_activation_magnitudes(small_splits):
    x_train, y_train = pairs_to_arrays(small_splits.train)
    magnitudes = {}
    for lam in (0.0, 1.0):
        config = TrainConfig(lam=lam, seed=0)
        model = init_model(GRID, small_splits.norm, seed=0)
        trained, _ = train(model, small_splits.train, small_splits.validation, config)
        magnitudes[lam] = total_loss(trained, x_train, y_train).l1
    assert magnitudes[1.0] < magnitudes[0.0]


def test_loss_bookkeeping_at_every_step(small_splits):
    config = TrainConfig()
    _, report = train(init_model(GRID, small_splits.norm), small_splits.train, small_splits.validation, config)

    assert report.steps == 400
    for total, pred, l1, ent in zip(report.train_loss, report.pred_loss, report.l1_term, report.entropy_term):
        assert total - pred == pytest.approx(config.lam * (config.nu1 * l1 + config.nu2 * ent), rel=1e-9, abs=1e-15)
        assert 0.0 <= ent <= math.log(2) + 1e-12


def test_training_is_deterministic(small_splits):
    config = TrainConfig(steps=25, batch_size=8, seed=3)
    runs = [
        train(init_model(GRID, small_splits.norm, seed=3), small_splits.train, small_splits.validation, config)
        for _ in range(2)
    ]
    assert np.array_equal(runs[0][0].parameters(), runs[1][0].parameters())
    assert runs[0][1].train_loss == runs[1][1].train_loss


def test_oversized_batch_is_clamped(small_splits, log_messages):
    config = TrainConfig(steps=3, batch_size=10_000)
    _, report = train(init_model(GRID), small_splits.train, small_splits.validation, config)
    assert report.steps == 3
    assert any("exceeds" in message for message in log_messages)


def test_divergence_is_detected(small_splits):
    config = TrainConfig(steps=10, learning_rate=1e12)
    with pytest.raises(TrainingDivergedError) as exc_info:
        train(init_model(GRID), small_splits.train, small_splits.validation, config)
    assert exc_info.value.step == 1


def test_train_requires_pairs(small_splits):
    with pytest.raises(ValueError, match="non-empty"):
        train(init_model(GRID), [], small_splits.validation, TrainConfig(steps=1))


def test_save_train_report_and_predictions(tmp_path, small_splits):
    model = init_model(GRID, small_splits.norm)
    _, report = train(model, small_splits.train, small_splits.validation, TrainConfig(steps=4, batch_size=8))

    table = read_csv_table(save_train_report(report, tmp_path / "train_report.csv"), REPORT_SCHEMA)
    assert table.column("step").to_pylist() == [1, 2, 3, 4]
    assert table.column("val_loss").to_pylist() == pytest.approx(report.val_loss, rel=1e-12)

    table = read_csv_table(
        save_predictions(model, small_splits.test, small_splits.norm, tmp_path / "predictions.csv"),
        PREDICTIONS_SCHEMA,
    )
    assert table.num_rows == len(small_splits.test)
    assert table.column("cycle").to_pylist() == [pair.cycle for pair in small_splits.test]
