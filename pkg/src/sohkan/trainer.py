import time
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pyarrow as pa
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from sohkan.data_utils import HorizonPair, NormalizationParams, pairs_to_arrays
from sohkan.kan import KanModel, activation_l1, entropy, forward, gradient
from sohkan.utils import write_csv_columns


DIVERGENCE_LIMIT = 1e6

REPORT_SCHEMA = pa.schema(
    [
        pa.field("step", pa.int64(), nullable=False),
        pa.field("train_loss", pa.float64(), nullable=False),
        pa.field("val_loss", pa.float64(), nullable=False),
    ]
)

PREDICTIONS_SCHEMA = pa.schema(
    [
        pa.field("cycle", pa.int64(), nullable=False),
        pa.field("true_temp_c", pa.float64(), nullable=False),
        pa.field("pred_temp_c", pa.float64(), nullable=False),
    ]
)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float, split: str = "train"):
        super().__init__(
            f"Training diverged at step {step}: {split} loss {loss!r} is non-finite or exceeds {DIVERGENCE_LIMIT:g}."
            " Lower the learning rate or the regularization weights."
        )
        self.step = step
        self.loss = loss


class TrainConfig(BaseModel):
    """Optimization settings. Defaults are lambda=0.001, nu1=0.12, nu2=0.15, 400 steps at batch size
    128; the learning rate and seed are not part of that reference setup."""

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True, allow_inf_nan=False)

    lam: float = Field(0.001, ge=0, alias="lambda")
    nu1: float = Field(0.12, ge=0)
    nu2: float = Field(0.15, ge=0)
    steps: int = Field(400, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    seed: int = Field(42, ge=0)
    horizon_n: int = Field(100, ge=1, alias="horizon_N")
    grid_intervals: int = Field(4, ge=1)
    spline_order: int = Field(3, ge=1)
    progress: bool = False


class LossTerms(NamedTuple):
    total: float
    pred: float
    l1: float
    entropy: float


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    pred_loss: list[float] = field(default_factory=list)
    l1_term: list[float] = field(default_factory=list)
    entropy_term: list[float] = field(default_factory=list)
    initial_val_loss: float | None = None
    test_rmse: float | None = None
    wall_time: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.train_loss)

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "initial_val_loss": self.initial_val_loss,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_val_loss": self.val_loss[-1] if self.val_loss else None,
            "test_rmse_c": self.test_rmse,
        }


class Adam:
    """Adaptive-moment optimizer over a flat parameter vector, updated in place by `step`."""

    def __init__(
        self, params: np.ndarray, lr: float = 0.01, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
    ):
        self.params = np.array(params, dtype=float)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.first_moment = np.zeros_like(self.params)
        self.second_moment = np.zeros_like(self.params)
        self.n_steps = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.n_steps += 1
        self.first_moment = self.beta1 * self.first_moment + (1 - self.beta1) * grad
        self.second_moment = self.beta2 * self.second_moment + (1 - self.beta2) * grad**2
        m_hat = self.first_moment / (1 - self.beta1**self.n_steps)
        v_hat = self.second_moment / (1 - self.beta2**self.n_steps)
        self.params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.params


def prediction_loss(model: KanModel, inputs, targets) -> float:
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        raise ValueError("Cannot compute a loss on an empty batch")
    return float(np.mean((forward(model, inputs) - targets) ** 2))


def total_loss(model: KanModel, inputs, targets, lam: float = 0.0, nu1: float = 0.0, nu2: float = 0.0) -> LossTerms:
    """l_total = l_pred + lam * (nu1 * (|A1| + |A2|) + nu2 * S), with the activation magnitudes
    measured on the same batch as the prediction loss.

    Args:
        model (KanModel): the model
        inputs: batch of (T̄, k̄) inputs, shape (n, 2)
        targets: batch of targets, shape (n,)
        lam (float): overall regularization weight
        nu1 (float): weight of the L1 term
        nu2 (float): weight of the entropy term

    Returns:
        LossTerms: (total, pred, l1, entropy)
    """
    inputs = np.asarray(inputs, dtype=float)
    pred = prediction_loss(model, inputs, targets)
    magnitudes = [activation_l1(model.a1, inputs[:, 0]), activation_l1(model.a2, inputs[:, 1])]
    l1 = float(sum(magnitudes))
    ent = entropy(magnitudes)
    return LossTerms(total=pred + lam * (nu1 * l1 + nu2 * ent), pred=pred, l1=l1, entropy=ent)


def _check_finite(loss: float, step: int, split: str):
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(step, loss, split)


def train(
    model: KanModel,
    pairs_train: Sequence[HorizonPair],
    pairs_val: Sequence[HorizonPair],
    config: TrainConfig,
    pairs_test: Sequence[HorizonPair] | None = None,
) -> tuple[KanModel, TrainReport]:
    """Optimize `model` for `config.steps` Adam steps on mini-batches of the training pairs.

    Batches are consecutive slices of a seeded permutation of the training set; a new permutation
    is drawn when fewer than a batch of indices remain. The returned model is the one after the
    final step.

    Args:
        model (KanModel): the initial model, left untouched
        pairs_train (Sequence[HorizonPair]): training pairs
        pairs_val (Sequence[HorizonPair]): validation pairs, evaluated after every step
        config (TrainConfig): the optimization settings
        pairs_test (Sequence[HorizonPair] | None): if given (and the model carries normalization
        bounds), the final test RMSE in °C is added to the report

    Returns:
        tuple[KanModel, TrainReport]: the trained model and the loss curves
    """
    if not pairs_train or not pairs_val:
        raise ValueError("Training needs non-empty training and validation pairs")

    start_time = time.perf_counter()
    x_train, y_train = pairs_to_arrays(pairs_train)
    x_val, y_val = pairs_to_arrays(pairs_val)
    n_train = len(y_train)
    batch_size = min(config.batch_size, n_train)
    if batch_size < config.batch_size:
        logger.info(f"Batch size {config.batch_size} exceeds the {n_train} training pairs, using {batch_size}")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n_train)
    cursor = 0
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    report = TrainReport(initial_val_loss=prediction_loss(model, x_val, y_val))

    for step in tqdm(range(1, config.steps + 1), desc="Training", unit="step", disable=not config.progress):
        if cursor + batch_size > n_train:
            order = rng.permutation(n_train)
            cursor = 0
        batch = order[cursor : cursor + batch_size]
        cursor += batch_size

        current = model.with_parameters(optimizer.params)
        terms = total_loss(current, x_train[batch], y_train[batch], config.lam, config.nu1, config.nu2)
        _check_finite(terms.total, step, "train")

        optimizer.step(gradient(current, x_train[batch], y_train[batch], config.lam, config.nu1, config.nu2))
        val_loss = prediction_loss(model.with_parameters(optimizer.params), x_val, y_val)
        _check_finite(val_loss, step, "validation")

        report.train_loss.append(terms.total)
        report.pred_loss.append(terms.pred)
        report.l1_term.append(terms.l1)
        report.entropy_term.append(terms.entropy)
        report.val_loss.append(val_loss)
        logger.debug(f"step {step}: train {terms.total:.6g} (pred {terms.pred:.6g}), val {val_loss:.6g}")

    trained = model.with_parameters(optimizer.params)
    if pairs_test and trained.norm is not None:
        report.test_rmse = evaluate_rmse(trained, pairs_test, trained.norm)
    report.wall_time = time.perf_counter() - start_time

    logger.info(
        f"Trained {config.steps} steps in {report.wall_time:.2f}s: validation loss"
        f" {report.initial_val_loss:.4g} -> {report.val_loss[-1]:.4g}"
        + (f", test RMSE {report.test_rmse:.3f} °C" if report.test_rmse is not None else "")
    )
    return trained, report


def evaluate_rmse(model: KanModel, pairs_test: Sequence[HorizonPair], norm: NormalizationParams) -> float:
    """Root-mean-square error in °C, i.e. of delta_T * (ŷ - y)."""
    if not pairs_test:
        raise ValueError("Cannot evaluate the RMSE on an empty split")

    inputs, targets = pairs_to_arrays(pairs_test)
    residuals = norm.delta * (forward(model, inputs) - targets)
    return float(np.sqrt(np.mean(residuals**2)))


def predict_temperatures(
    model: KanModel, pairs: Sequence[HorizonPair], norm: NormalizationParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True and predicted horizon temperatures in °C.

    Returns:
        tuple of cycle indices, true temperatures and predicted temperatures
    """
    inputs, targets = pairs_to_arrays(pairs)
    cycles = np.array([pair.cycle for pair in pairs], dtype=np.int64)
    return cycles, norm.denormalize(targets), norm.denormalize(forward(model, inputs))


def save_train_report(report: TrainReport, pfout: PathLike) -> Path:
    steps = np.arange(1, report.steps + 1, dtype=np.int64)
    columns = {"step": steps, "train_loss": report.train_loss, "val_loss": report.val_loss}
    return write_csv_columns(columns, REPORT_SCHEMA, pfout)


def save_predictions(
    model: KanModel, pairs: Sequence[HorizonPair], norm: NormalizationParams, pfout: PathLike
) -> Path:
    cycles, true_temps, pred_temps = predict_temperatures(model, pairs, norm)
    columns = {"cycle": cycles, "true_temp_c": true_temps, "pred_temp_c": pred_temps}
    return write_csv_columns(columns, PREDICTIONS_SCHEMA, pfout)
