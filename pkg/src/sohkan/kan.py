"""Width-[[2,1]] Kolmogorov-Arnold network: T̄(i+N) = A1(T̄(i)) + A2(k̄), where each activation is
w_silu * silu(x) + sum_i c_i * B_i(x) over a uniform B-spline grid."""

from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger
from scipy.special import expit

from sohkan.data_utils import NormalizationParams
from sohkan.utils import read_json, write_json


@dataclass(frozen=True)
class SplineGrid:
    lo: float = 0.0
    hi: float = 1.0
    intervals: int = 4
    order: int = 3

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"Grid domain must satisfy hi > lo, got [{self.lo}, {self.hi}]")
        if self.intervals < 1:
            raise ValueError(f"A grid needs at least one interval, got {self.intervals}")
        if self.order < 1:
            raise ValueError(f"Spline order must be at least 1, got {self.order}")

    @property
    def n_basis(self) -> int:
        return self.intervals + self.order

    @property
    def knots(self) -> np.ndarray:
        """Uniform knots over the domain, extended by `order` knots on each side."""
        step = (self.hi - self.lo) / self.intervals
        knots = self.lo + np.arange(-self.order, self.intervals + self.order + 1) * step
        knots[self.order : self.order + self.intervals + 1] = np.linspace(self.lo, self.hi, self.intervals + 1)
        return knots


def bspline_basis(grid: SplineGrid, x) -> np.ndarray:
    """Evaluate all G + p basis functions with the Cox-de Boor recursion. Inputs outside the grid
    domain are clamped to its boundary.

    Args:
        grid (SplineGrid): the spline grid
        x: scalar or array of finite inputs

    Returns:
        np.ndarray: basis values with shape x.shape + (G + p,)
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("B-spline inputs must be finite")

    knots = grid.knots
    x = np.clip(x, grid.lo, grid.hi)[..., None]
    bases = ((x >= knots[:-1]) & (x < knots[1:])).astype(float)
    for k in range(1, grid.order + 1):
        left = (x - knots[: -k - 1]) / (knots[k:-1] - knots[: -k - 1]) * bases[..., :-1]
        right = (knots[k + 1 :] - x) / (knots[k + 1 :] - knots[1:-k]) * bases[..., 1:]
        bases = left + right
    return bases


def silu(x):
    x = np.asarray(x, dtype=float)
    return x * expit(x)


@dataclass(frozen=True, eq=False)
class Activation:
    w_silu: float
    coeffs: np.ndarray
    grid: SplineGrid

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (self.grid.n_basis,):
            raise ValueError(f"Expected {self.grid.n_basis} spline coefficients, got shape {coeffs.shape}")
        object.__setattr__(self, "coeffs", coeffs)

    def __call__(self, x) -> np.ndarray:
        return activation_eval(self, x)

    def features(self, x) -> np.ndarray:
        """Columns [silu(x), B_0(x), ..., B_{G+p-1}(x)]. The activation is linear in its parameters,
        so A(x) = features(x) @ [w_silu, *coeffs]."""
        x = np.asarray(x, dtype=float)
        return np.concatenate((silu(x)[..., None], bspline_basis(self.grid, x)), axis=-1)

    @property
    def parameters(self) -> np.ndarray:
        return np.concatenate(([self.w_silu], self.coeffs))


def activation_eval(a: Activation, x) -> np.ndarray:
    """A(x) = w_silu * silu(x) + sum_i c_i * B_i(x); silu sees the raw input, the spline the
    clamped one."""
    return a.w_silu * silu(x) + bspline_basis(a.grid, x) @ a.coeffs


@dataclass(frozen=True, eq=False)
class KanModel:
    a1: Activation
    a2: Activation
    norm: NormalizationParams | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.a1.grid != self.a2.grid:
            raise ValueError(f"Both activations must share one grid, got {self.a1.grid} and {self.a2.grid}")

    @property
    def grid(self) -> SplineGrid:
        return self.a1.grid

    @property
    def n_parameters(self) -> int:
        return 2 * (self.grid.n_basis + 1)

    def parameters(self) -> np.ndarray:
        """Flat parameter vector [w1, c1..., w2, c2...]."""
        return np.concatenate((self.a1.parameters, self.a2.parameters))

    def with_parameters(self, params: np.ndarray) -> "KanModel":
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_parameters,):
            raise ValueError(f"Expected {self.n_parameters} parameters, got shape {params.shape}")

        half = self.n_parameters // 2
        return KanModel(
            a1=Activation(w_silu=float(params[0]), coeffs=params[1:half].copy(), grid=self.grid),
            a2=Activation(w_silu=float(params[half]), coeffs=params[half + 1 :].copy(), grid=self.grid),
            norm=self.norm,
            meta=dict(self.meta),
        )

    def __call__(self, inputs) -> np.ndarray:
        return forward(self, inputs)


def init_model(
    grid: SplineGrid,
    norm: NormalizationParams | None = None,
    seed: int = 42,
    meta: dict[str, Any] | None = None,
) -> KanModel:
    """Silu backbone (w_silu = 1) with spline coefficients drawn from U(-0.1, 0.1)."""
    rng = np.random.default_rng(seed)
    a1 = Activation(w_silu=1.0, coeffs=rng.uniform(-0.1, 0.1, grid.n_basis), grid=grid)
    a2 = Activation(w_silu=1.0, coeffs=rng.uniform(-0.1, 0.1, grid.n_basis), grid=grid)
    return KanModel(a1=a1, a2=a2, norm=norm, meta={"seed": seed, **(meta or {})})


def _split_inputs(inputs) -> tuple[np.ndarray, np.ndarray]:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[-1] != 2:
        raise ValueError(f"Inputs must have (T̄, k̄) in their last axis, got shape {inputs.shape}")
    return inputs[..., 0], inputs[..., 1]


def forward(model: KanModel, inputs) -> np.ndarray:
    """Predict T̄(i+N) from inputs (..., 2) holding (T̄(i), k̄)."""
    t_bar, k_bar = _split_inputs(inputs)
    return model.a1(t_bar) + model.a2(k_bar)


def design_matrix(model: KanModel, inputs) -> np.ndarray:
    """Per-sample features such that forward(model, inputs) == design_matrix(...) @ model.parameters()."""
    t_bar, k_bar = _split_inputs(inputs)
    return np.concatenate((model.a1.features(t_bar), model.a2.features(k_bar)), axis=-1)


def activation_l1(a: Activation, inputs) -> float:
    """Mean absolute activation output over a batch."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.size == 0:
        raise ValueError("Cannot compute the L1 magnitude of an activation on an empty batch")
    return float(np.mean(np.abs(activation_eval(a, inputs))))


def entropy(l1_values) -> float:
    """Self-entropy of the activation magnitudes normalized to a distribution, with 0 * log 0 = 0."""
    magnitudes = np.asarray(l1_values, dtype=float)
    total = magnitudes.sum()
    if total <= 0:
        logger.warning("All activation magnitudes are zero: the entropy regularizer is inactive")
        return 0.0

    probs = magnitudes[magnitudes > 0] / total
    return float(-np.sum(probs * np.log(probs)))


def entropy_gradient(l1_values) -> np.ndarray:
    """dS/dL_i = -(ln p_i + S) / M with M = sum_i L_i. Zero magnitudes get a zero gradient."""
    magnitudes = np.asarray(l1_values, dtype=float)
    total = magnitudes.sum()
    grad = np.zeros_like(magnitudes)
    if total <= 0:
        return grad

    positive = magnitudes > 0
    probs = magnitudes[positive] / total
    ent = -np.sum(probs * np.log(probs))
    grad[positive] = -(np.log(probs) + ent) / total
    return grad


def gradient(
    model: KanModel,
    inputs,
    targets,
    lam: float = 0.0,
    nu1: float = 0.0,
    nu2: float = 0.0,
) -> np.ndarray:
    """Gradient of mean((ŷ - y)²) + lam * (nu1 * sum_i |A_i| + nu2 * S) with respect to the flat
    parameter vector. The prediction term is exact, the regularizer uses sign(0) = 0.

    Args:
        model (KanModel): the model
        inputs: batch of shape (n, 2)
        targets: batch of shape (n,)
        lam (float): overall regularization weight
        nu1 (float): weight of the L1 magnitudes
        nu2 (float): weight of the entropy

    Returns:
        np.ndarray: gradient with the layout of `KanModel.parameters()`
    """
    features = design_matrix(model, inputs)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("Gradient requires a non-empty batch of shape (n, 2)")

    params = model.parameters()
    residuals = features @ params - targets
    grad = 2.0 * features.T @ residuals / len(features)
    if lam == 0 or (nu1 == 0 and nu2 == 0):
        return grad

    half = model.n_parameters // 2
    blocks = (features[:, :half], features[:, half:])
    outputs = [block @ params[idx * half : (idx + 1) * half] for idx, block in enumerate(blocks)]
    magnitudes = np.array([np.mean(np.abs(out)) for out in outputs])
    weights = nu1 + nu2 * entropy_gradient(magnitudes)
    for idx, (block, out) in enumerate(zip(blocks, outputs)):
        l1_grad = np.sign(out) @ block / len(block)
        grad[idx * half : (idx + 1) * half] += lam * weights[idx] * l1_grad
    return grad


def model_to_dict(model: KanModel) -> dict[str, Any]:
    grid = model.grid
    return {
        "grid": {"lo": grid.lo, "hi": grid.hi, "intervals": grid.intervals, "order": grid.order},
        "a1": {"w_silu": model.a1.w_silu, "coeffs": model.a1.coeffs},
        "a2": {"w_silu": model.a2.w_silu, "coeffs": model.a2.coeffs},
        "norm": None if model.norm is None else {"t_min": model.norm.t_min, "t_max": model.norm.t_max},
        "meta": {
            "horizon_N": model.meta.get("horizon_N"),
            "E": model.meta.get("E"),
            "seed": model.meta.get("seed"),
        },
    }


def model_from_dict(data: dict[str, Any]) -> KanModel:
    try:
        grid = SplineGrid(**data["grid"])
        norm = None if data.get("norm") is None else NormalizationParams(**data["norm"])
        activations = [
            Activation(
                w_silu=float(data[name]["w_silu"]),
                coeffs=np.array(data[name]["coeffs"], dtype=float),
                grid=grid,
            )
            for name in ("a1", "a2")
        ]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"Malformed model document: {exc!r}") from exc

    return KanModel(a1=activations[0], a2=activations[1], norm=norm, meta=dict(data.get("meta") or {}))


def save_model(model: KanModel, pfout: PathLike) -> Path:
    return write_json(model_to_dict(model), pfout)


def load_model(pfin: PathLike) -> KanModel:
    pfin = Path(pfin)
    if not pfin.is_file():
        raise FileNotFoundError(f"Model file not found: {pfin}")
    return model_from_dict(read_json(pfin))
