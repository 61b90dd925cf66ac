"""Closed-form expressions for the learned cycle activation A2(k̄), scored by R²."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pyarrow as pa
from loguru import logger
from scipy.optimize import least_squares

from sohkan.kan import KanModel
from sohkan.utils import read_json, write_csv_columns, write_json


POWER_DEGREES = (2, 3, 4)
GRID_LIMIT = 20.0
GRID_SIZE = 200
# Power-form bases closer than this to zero anywhere on [0, 1] are rejected
BASE_EPS = 1e-6
REFINE_TOL = 1e-14
MIN_DENSE_SAMPLES = 100
# R² scores closer than this are tied and ranked by parameter count
R2_TIE_TOL = 1e-5

CURVE_SCHEMA = pa.schema(
    [
        pa.field("k_bar", pa.float64(), nullable=False),
        pa.field("a2", pa.float64(), nullable=False),
    ]
)


class OrientationError(ValueError):
    """Raised when a power-form base or an A2 denominator reaches zero on the cycle axis."""


@dataclass(frozen=True, eq=False)
class ActivationCurve:
    k_bar: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k_bar = np.asarray(self.k_bar, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if k_bar.ndim != 1 or k_bar.shape != values.shape:
            raise ValueError(f"k_bar and values must be 1D and equally long, got {k_bar.shape} and {values.shape}")
        if len(k_bar) < 2:
            raise ValueError(f"An activation curve needs at least 2 samples, got {len(k_bar)}")
        if np.any(np.diff(k_bar) <= 0):
            raise ValueError("k_bar must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("Activation curve values must be finite")
        object.__setattr__(self, "k_bar", k_bar)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.k_bar)


@dataclass(frozen=True)
class SymbolicFit:
    """One fitted closed form. `params` keeps the parameter roles of the form:
    affine a + b*k̄, power_n (a - b*k̄)^n, exp a*exp(b*k̄) + c, log a*ln(b*k̄ + 1) + c."""

    form: str
    params: dict[str, float]
    r2: float
    n_params: int
    degree: int | None = None
    error: str | None = None

    @property
    def is_power(self) -> bool:
        return self.form.startswith("power_")

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def formula(self) -> str:
        if self.failed:
            return f"{self.form}: fit failed ({self.error})"

        p = {name: f"{value:.6g}" for name, value in self.params.items()}
        if self.form == "affine":
            expr = f"{p['a']} + {p['b']}*kbar"
        elif self.is_power:
            expr = f"({p['a']} - {p['b']}*kbar)^{self.degree}"
        elif self.form == "exp":
            expr = f"{p['a']}*exp({p['b']}*kbar) + {p['c']}"
        else:
            expr = f"{p['a']}*ln({p['b']}*kbar + 1) + {p['c']}"
        return f"A2(kbar) = {expr}, kbar = k/E in [0, 1]"

    def predict(self, k_bar) -> np.ndarray:
        if self.failed:
            raise ValueError(f"Cannot evaluate the failed {self.form} fit")
        return FORMS[self.form].func(np.asarray(k_bar, dtype=float), *self.params.values())

    @classmethod
    def from_dict(cls, data: dict) -> "SymbolicFit":
        form = data["form"]
        if form not in FORMS:
            raise ValueError(f"Unknown symbolic form '{form}', choose from {sorted(FORMS)}")
        r2_value = data.get("r2")
        return cls(
            form=form,
            params={name: float(value) for name, value in (data.get("params") or {}).items()},
            r2=-math.inf if r2_value is None else float(r2_value),
            n_params=len(FORMS[form].param_names),
            degree=FORMS[form].degree,
            error=data.get("error"),
        )

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "params": self.params,
            "r2": self.r2,
            "degree": self.degree,
            "formula": self.formula,
            "error": self.error,
        }


@dataclass(frozen=True)
class FormSpec:
    func: Callable
    param_names: tuple[str, ...]
    degree: int | None = None
    jac: Callable | None = field(default=None, repr=False)


def _power_func(n: int) -> Callable:
    def func(k_bar, a, b):
        return (a - b * k_bar) ** n

    return func


def _power_jac(n: int) -> Callable:
    def jac(k_bar, a, b):
        base = (a - b * k_bar) ** (n - 1)
        return np.column_stack((n * base, -n * k_bar * base))

    return jac


FORMS: dict[str, FormSpec] = {
    "affine": FormSpec(func=lambda k, a, b: a + b * k, param_names=("a", "b"), degree=1),
    "exp": FormSpec(func=lambda k, a, b, c: a * np.exp(b * k) + c, param_names=("a", "b", "c")),
    "log": FormSpec(func=lambda k, a, b, c: a * np.log(b * k + 1.0) + c, param_names=("a", "b", "c")),
    **{
        f"power_{n}": FormSpec(func=_power_func(n), param_names=("a", "b"), degree=n, jac=_power_jac(n))
        for n in POWER_DEGREES
    },
}


def r2(y_true, y_fit) -> float:
    """Coefficient of determination 1 - SS_res/SS_tot. A constant `y_true` gives 1 for a perfect fit
    and -inf otherwise.

    Args:
        y_true: observed values
        y_fit: fitted values

    Returns:
        float: the R² score, at most 1
    """
    y_true = np.asarray(y_true, dtype=float)
    y_fit = np.asarray(y_fit, dtype=float)
    if y_true.shape != y_fit.shape or y_true.ndim != 1 or len(y_true) < 2:
        raise ValueError(f"r2 needs two equally long vectors of length >= 2, got {y_true.shape} and {y_fit.shape}")

    ss_res = float(np.sum((y_true - y_fit) ** 2))
    # Rounding in the mean leaves SS_tot slightly above 0 for a constant curve
    if np.ptp(y_true) == 0:
        logger.warning("Constant curve: R² is degenerate (SS_tot = 0)")
        return 1.0 if ss_res == 0 else -math.inf
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


def sample_a2(model: KanModel, n_samples: int = 1001) -> ActivationCurve:
    """Evaluate A2 on a uniform grid over k̄ in [0, 1]."""
    if n_samples < 2:
        raise ValueError(f"Need at least 2 samples, got {n_samples}")
    if n_samples < MIN_DENSE_SAMPLES:
        logger.warning(f"Sampling A2 at only {n_samples} points, symbolic fits use at least {MIN_DENSE_SAMPLES}")

    k_bar = np.linspace(0.0, 1.0, n_samples)
    return ActivationCurve(k_bar=k_bar, values=model.a2(k_bar))


def _refine(form: str, curve: ActivationCurve, x0: np.ndarray, bounds=(-np.inf, np.inf)) -> np.ndarray:
    spec = FORMS[form]

    def residuals(theta):
        return spec.func(curve.k_bar, *theta) - curve.values

    jac = "2-point" if spec.jac is None else (lambda theta: spec.jac(curve.k_bar, *theta))
    method = "lm" if bounds == (-np.inf, np.inf) else "trf"
    with np.errstate(over="ignore", invalid="ignore"):
        result = least_squares(
            residuals, x0, jac=jac, method=method, bounds=bounds, xtol=REFINE_TOL, ftol=REFINE_TOL, gtol=REFINE_TOL
        )
    return result.x if np.all(np.isfinite(result.x)) and np.all(np.isfinite(result.fun)) else x0


def _finish(form: str, curve: ActivationCurve, theta) -> SymbolicFit:
    spec = FORMS[form]
    params = {name: float(value) for name, value in zip(spec.param_names, theta)}
    if not all(math.isfinite(value) for value in params.values()):
        raise ValueError(f"Non-finite parameters {params}")

    score = r2(curve.values, spec.func(curve.k_bar, *params.values()))
    return SymbolicFit(form=form, params=params, r2=score, n_params=len(params), degree=spec.degree)


def _base_clear_of_zero(a, b):
    """The base a - b*k̄ is linear, so it stays away from zero on [0, 1] iff both endpoints do and
    they share a sign."""
    end = a - b
    return (np.sign(a) == np.sign(end)) & (np.minimum(np.abs(a), np.abs(end)) > BASE_EPS)


def fit_power_form(curve: ActivationCurve, n: int) -> SymbolicFit:
    """Least-squares fit of (a - b*k̄)^n: a 200x200 grid over a, b in [-20, 20] (both signs of the
    base) followed by Levenberg-Marquardt refinement. Only bases that stay clear of zero on [0, 1]
    are accepted. For even n the branch with a >= 0 is reported.

    Args:
        curve (ActivationCurve): the sampled activation
        n (int): the degree, 2, 3 or 4

    Returns:
        SymbolicFit: the refined fit with its R² score
    """
    if n not in POWER_DEGREES:
        raise ValueError(f"Power degree must be one of {POWER_DEGREES}, got {n}")

    form = f"power_{n}"
    axis = np.linspace(-GRID_LIMIT, GRID_LIMIT, GRID_SIZE)
    best_sse, best = math.inf, None
    for a in axis:
        valid = _base_clear_of_zero(a, axis)
        if not valid.any():
            continue
        b = axis[valid]
        sse = np.sum(((a - np.outer(b, curve.k_bar)) ** n - curve.values) ** 2, axis=1)
        idx = int(np.argmin(sse))
        if sse[idx] < best_sse:
            best_sse, best = float(sse[idx]), np.array([a, b[idx]])

    if best is None:
        raise OrientationError(f"No {form} candidate keeps its base away from zero on [0, 1]")

    theta = _refine(form, curve, best)
    if not _base_clear_of_zero(theta[0], theta[1]):
        logger.warning(f"Refined {form} base crosses zero on [0, 1]; keeping the grid estimate")
        theta = best
    if n % 2 == 0 and theta[0] < 0:
        theta = -theta
    return _finish(form, curve, theta)


def fit_affine(curve: ActivationCurve) -> SymbolicFit:
    design = np.column_stack((np.ones(len(curve)), curve.k_bar))
    theta, *_ = np.linalg.lstsq(design, curve.values, rcond=None)
    return _finish("affine", curve, theta)


def _fit_separable(form: str, curve: ActivationCurve, b_grid: np.ndarray, bounds=(-np.inf, np.inf)) -> SymbolicFit:
    """Forms a*g(b*k̄) + c: scan b, solve (a, c) by linear least squares, then refine all three."""
    spec = FORMS[form]
    best_sse, best = math.inf, None
    for b in b_grid:
        column = spec.func(curve.k_bar, 1.0, b, 0.0)
        design = np.column_stack((column, np.ones(len(curve))))
        (a, c), *_ = np.linalg.lstsq(design, curve.values, rcond=None)
        sse = float(np.sum((design @ np.array([a, c]) - curve.values) ** 2))
        if sse < best_sse:
            best_sse, best = sse, np.array([a, b, c])

    return _finish(form, curve, _refine(form, curve, best, bounds=bounds))


def fit_exp(curve: ActivationCurve) -> SymbolicFit:
    return _fit_separable("exp", curve, np.linspace(-GRID_LIMIT, GRID_LIMIT, 2 * GRID_SIZE))


def fit_log(curve: ActivationCurve) -> SymbolicFit:
    b_grid = np.linspace(-0.99, GRID_LIMIT, 2 * GRID_SIZE)
    bounds = ([-np.inf, -1.0 + 1e-9, -np.inf], [np.inf, np.inf, np.inf])
    return _fit_separable("log", curve, b_grid[b_grid != 0], bounds=bounds)


FITTERS: dict[str, Callable[[ActivationCurve], SymbolicFit]] = {
    "affine": fit_affine,
    "exp": fit_exp,
    "log": fit_log,
    **{f"power_{n}": (lambda curve, n=n: fit_power_form(curve, n)) for n in POWER_DEGREES},
}


def _safe_fit(form: str, curve: ActivationCurve) -> SymbolicFit:
    spec = FORMS[form]
    try:
        return FITTERS[form](curve)
    except Exception as exc:
        logger.warning(f"Fitting {form} failed: {exc!r}")
        return SymbolicFit(
            form=form, params={}, r2=-math.inf, n_params=len(spec.param_names), degree=spec.degree, error=repr(exc)
        )


def _tie_key(fit: SymbolicFit) -> tuple:
    return (fit.n_params, fit.degree or 0, -fit.r2, fit.form)


def rank_fits(fits: list[SymbolicFit], tie_tol: float = R2_TIE_TOL) -> list[SymbolicFit]:
    """Sort by R² descending. Fits within `tie_tol` of the best remaining R² count as tied and go
    to fewer parameters, then to lower degree. Failed fits come last.
    """
    scored = [fit for fit in fits if not fit.failed and math.isfinite(fit.r2)]
    failed = sorted((fit for fit in fits if fit.failed or not math.isfinite(fit.r2)), key=_tie_key)
    finished = sorted(scored, key=lambda fit: (-fit.r2, fit.form))

    ranked = []
    while finished:
        leader = finished[0].r2
        tied = [fit for fit in finished if fit.r2 >= leader - tie_tol]
        ranked.extend(sorted(tied, key=_tie_key))
        finished = finished[len(tied) :]
    return ranked + failed


def fit_dictionary(curve: ActivationCurve, max_workers: int | None = None) -> list[SymbolicFit]:
    """Fit every dictionary form (affine, power 2-4, exp, log) and rank them. Failed fits are kept at
    the end of the ranking with R² = -inf.

    Args:
        curve (ActivationCurve): the sampled activation
        max_workers (int | None): threads used to fit the forms concurrently

    Returns:
        list[SymbolicFit]: the fits, best first
    """
    forms = sorted(FITTERS)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        fits = list(executor.map(lambda form: _safe_fit(form, curve), forms))

    ranked = rank_fits(fits)
    best = ranked[0]
    logger.info(f"Best closed form: {best.formula} (R² = {best.r2:.6f})")
    return ranked


def save_curve_csv(curve: ActivationCurve, pfout: PathLike) -> Path:
    return write_csv_columns({"k_bar": curve.k_bar, "a2": curve.values}, CURVE_SCHEMA, pfout)


def save_fits(fits: Sequence[SymbolicFit], pfout: PathLike) -> Path:
    return write_json([fit.to_dict() for fit in fits], pfout)


def load_fits(pfin: PathLike) -> list[SymbolicFit]:
    pfin = Path(pfin)
    if not pfin.is_file():
        raise FileNotFoundError(f"Fits file not found: {pfin}")

    data = read_json(pfin)
    if not isinstance(data, list):
        raise ValueError(f"{pfin}: expected a JSON array of fits")
    return [SymbolicFit.from_dict(entry) for entry in data]
