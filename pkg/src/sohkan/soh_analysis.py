from dataclasses import dataclass, replace
from os import PathLike
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
import pyarrow as pa
from loguru import logger

from sohkan.data_utils import CycleDataset, HorizonPair
from sohkan.kan import KanModel
from sohkan.symbolic import ActivationCurve, OrientationError, SymbolicFit
from sohkan.utils import read_csv_table, write_csv_columns


SOH_SCHEMA = pa.schema(
    [
        pa.field("cycle", pa.int64(), nullable=False),
        pa.field("soh_percent", pa.float64(), nullable=False),
        pa.field("source", pa.string(), nullable=False),
    ]
)

ORACLE_SCHEMA = pa.schema(
    [
        pa.field("cycle", pa.int64(), nullable=False),
        pa.field("soh_percent", pa.float64(), nullable=False),
    ]
)

DENOMINATOR_EPS = 1e-9
SPREAD_EPS = 1e-9

OffsetHandling = Literal["raw", "anchored"]


@dataclass(frozen=True, eq=False)
class SohCurve:
    """Power-based SoH (100 * R(k0) / R(k)) per cycle. `source` is one of oracle, baseline_ir,
    spline_a2, spline_a2_anchored or power_form_<n>; closed forms keep their parameters."""

    cycles: np.ndarray
    soh_percent: np.ndarray
    source: str
    params: dict[str, float] | None = None

    def __post_init__(self):
        cycles = np.asarray(self.cycles, dtype=np.int64)
        soh = np.asarray(self.soh_percent, dtype=float)
        if cycles.ndim != 1 or cycles.shape != soh.shape:
            raise ValueError(f"cycles and soh_percent must be 1D and equally long, got {cycles.shape}, {soh.shape}")
        if not np.all(np.isfinite(soh)) or np.any(soh <= 0):
            raise ValueError(f"SoH values of '{self.source}' must be finite and positive")
        object.__setattr__(self, "cycles", cycles)
        object.__setattr__(self, "soh_percent", soh)

    def __len__(self) -> int:
        return len(self.cycles)


@dataclass(frozen=True)
class ErrorMetrics:
    mae: float
    rmse: float
    max_abs: float
    cycles: np.ndarray
    errors: np.ndarray

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "max": self.max_abs}


@dataclass(frozen=True)
class OffsetEstimate:
    """Constant to remove from A2 so that A1 maps the ambient temperature onto itself.

    Attributes:
        offset: c, the anchored curve is A2 - c
        slope: g of the line g*T̄ + b fitted to A1
        intercept: b of that line
        gamma: per-step decay g^(1/N), only when the training inputs have a usable spread
        degenerate: whether the slope came from the dense spline grid instead of the training inputs
    """

    offset: float
    slope: float
    intercept: float
    gamma: float | None
    degenerate: bool


def ir_drop_resistance(current: np.ndarray, voltage: np.ndarray, threshold: float = 0.5) -> float | None:
    """R = dV/dI over the first sample pair whose current changes by at least `threshold` (A), or
    None if there is no such step."""
    d_current = np.diff(current)
    steps = np.flatnonzero(np.abs(d_current) >= threshold)
    if steps.size == 0:
        return None
    idx = int(steps[0])
    return float((voltage[idx + 1] - voltage[idx]) / d_current[idx])


def baseline_ir_soh(dataset: CycleDataset, threshold: float = 0.5) -> SohCurve:
    """IR-drop baseline: R_k from the voltage jump at the first current step of every cycle.

    Args:
        dataset (CycleDataset): telemetry with voltage and current traces
        threshold (float): minimal |dI| (A) between two samples that counts as a current step

    Returns:
        SohCurve: 100 * R_k0 / R_k with source "baseline_ir"
    """
    resistances = []
    for record in dataset:
        resistance = ir_drop_resistance(record.current, record.voltage, threshold)
        if resistance is None:
            raise ValueError(f"Cycle {record.cycle_index}: no current step of at least {threshold} A")
        if not resistance > 0:
            raise ValueError(f"Cycle {record.cycle_index}: non-positive IR-drop resistance {resistance}")
        resistances.append(resistance)

    resistances = np.array(resistances)
    cycles = np.array([record.cycle_index for record in dataset], dtype=np.int64)
    return SohCurve(cycles=cycles, soh_percent=100.0 * resistances[0] / resistances, source="baseline_ir")


def estimate_a2_offset(
    model: KanModel,
    pairs_train: Sequence[HorizonPair],
    t_bar_ambient: float,
    horizon_n: int | None = None,
    n_grid: int = 201,
) -> OffsetEstimate:
    """Estimate the constant that leaks between A1 and A2.

    A1 should behave like gamma^N * T̄ + xi * sum_j gamma^j, which keeps the ambient temperature
    fixed: A1(T̄_amb) = T̄_amb. A line g*T̄ + b is fitted to A1 over the training inputs; if those
    have no spread, g comes from A1 on a dense grid over the spline domain and the line passes
    through the training point. The offset is c = T̄_amb - (g*T̄_amb + b).

    Args:
        model (KanModel): the trained model
        pairs_train (Sequence[HorizonPair]): training pairs, their T̄ inputs are used
        t_bar_ambient (float): normalized ambient temperature
        horizon_n (int | None): horizon in samples, used to report gamma
        n_grid (int): points of the dense grid for the degenerate case

    Returns:
        OffsetEstimate: the offset and the fitted line
    """
    if not pairs_train:
        raise ValueError("Offset estimation needs training pairs")

    t_bar = np.array([pair.t_bar for pair in pairs_train], dtype=float)
    degenerate = np.ptp(t_bar) <= SPREAD_EPS
    if degenerate:
        grid = np.linspace(model.grid.lo, model.grid.hi, n_grid)
        slope = float(np.polyfit(grid, model.a1(grid), 1)[0])
        intercept = float(np.mean(model.a1(t_bar)) - slope * np.mean(t_bar))
        logger.warning(
            f"Training inputs span no temperature range (T̄ = {t_bar[0]:.6g}): A1 slope taken from the spline grid"
        )
    else:
        slope, intercept = (float(value) for value in np.polyfit(t_bar, model.a1(t_bar), 1))

    offset = t_bar_ambient - (slope * t_bar_ambient + intercept)
    gamma = slope ** (1.0 / horizon_n) if horizon_n and not degenerate and slope > 0 else None
    logger.info(f"A2 offset {offset:.6g} (A1 ~ {slope:.6g} * T̄ + {intercept:.6g})")
    return OffsetEstimate(offset=offset, slope=slope, intercept=intercept, gamma=gamma, degenerate=bool(degenerate))


def soh_from_a2(curve: ActivationCurve, offset_handling: OffsetHandling = "raw", offset: float = 0.0) -> SohCurve:
    """SoH as A2(0) / A2(k̄) * 100 over the samples of an activation curve.

    The curve samples are taken to be the cycles 0..E, i.e. `sample_a2(model, E + 1)`.

    Args:
        curve (ActivationCurve): A2 sampled at k̄ = k/E
        offset_handling (str): "raw" uses A2 as is, "anchored" subtracts `offset` first
        offset (float): the constant from `estimate_a2_offset`

    Returns:
        SohCurve: source "spline_a2" or "spline_a2_anchored"
    """
    if offset_handling not in ("raw", "anchored"):
        raise ValueError(f"offset_handling must be 'raw' or 'anchored', got {offset_handling!r}")

    values = curve.values - offset if offset_handling == "anchored" else curve.values
    if np.any(np.abs(values) <= DENOMINATOR_EPS) or np.any(np.sign(values) != np.sign(values[0])):
        raise OrientationError("A2 crosses zero; offset calibration required")

    source = "spline_a2" if offset_handling == "raw" else "spline_a2_anchored"
    return SohCurve(cycles=np.arange(len(values)), soh_percent=100.0 * values[0] / values, source=source)


def oriented_power_params(fit: SymbolicFit) -> tuple[float, float, int]:
    """(a, b, n) of a power-form fit, with b flipped when |a - b*k̄| shrinks along k̄, since that would
    put SoH above 100%."""
    if not fit.is_power or fit.failed:
        raise ValueError(f"Closed-form SoH needs a successful power-form fit, got '{fit.form}'")

    a, b, n = fit.params["a"], fit.params["b"], fit.degree
    if abs(a - b) < abs(a):
        logger.warning(f"{fit.form} base decreases in magnitude over k̄ (a={a:.6g}, b={b:.6g}): flipping b -> -b")
        b = -b
    return a, b, n


def formula_entry(fit: SymbolicFit) -> dict:
    """A fit as listed under the report's "formulas". Successful power forms also carry the SoH formula
    they give, with `b_flipped` set when b had to be negated to keep SoH at or below 100%."""
    entry = fit.to_dict()
    if fit.is_power and not fit.failed:
        a, b, n = oriented_power_params(fit)
        entry["b_flipped"] = b != fit.params["b"]
        entry["soh_params"] = {"a": a, "b": b, "n": n}
        entry["soh_formula"] = f"SoH(k) = 100 * ({a:.6g})^{n} / ({a:.6g} - {b:.6g}*k/E)^{n} %"
    return entry


def soh_closed_form(fit: SymbolicFit, k_bar):
    """100 * f(0)^n / f(k̄)^n for a power-form fit f(k̄) = a - b*k̄, with the orientation of b resolved
    so that SoH does not grow."""
    a, b, n = oriented_power_params(fit)
    base = a - b * np.asarray(k_bar, dtype=float)
    if np.any(np.abs(base) <= DENOMINATOR_EPS):
        raise OrientationError(f"{fit.form} base is zero within [0, 1]")
    return 100.0 * a**n / base**n


def closed_form_curve(fit: SymbolicFit, n_eol: int) -> SohCurve:
    """Closed-form SoH at the cycles 0..E."""
    if n_eol < 1:
        raise ValueError(f"Closed-form SoH needs at least two cycles, got E={n_eol}")

    a, b, n = oriented_power_params(fit)
    cycles = np.arange(n_eol + 1)
    oriented = replace(fit, params={"a": a, "b": b})
    return SohCurve(
        cycles=cycles,
        soh_percent=soh_closed_form(oriented, cycles / n_eol),
        source=f"power_form_{n}",
        params={"a": a, "b": b, "n": n},
    )


def crossing_cycle(curve: SohCurve, threshold: float = 70.0) -> int | None:
    """Smallest cycle with SoH <= threshold (%), or None if the curve never gets there."""
    if len(curve) == 0:
        raise ValueError("Cannot find a crossing on an empty curve")

    below = np.flatnonzero(curve.soh_percent <= threshold)
    return int(curve.cycles[below[0]]) if below.size else None


def soh_at_cycle(curve: SohCurve, cycle: int) -> float:
    matches = np.flatnonzero(curve.cycles == cycle)
    if matches.size == 0:
        raise ValueError(f"Cycle {cycle} is not part of the '{curve.source}' curve")
    return float(curve.soh_percent[matches[0]])


def error_metrics(estimate: SohCurve, reference: SohCurve) -> ErrorMetrics:
    """MAE, RMSE and max absolute error (percentage points) of `estimate` against `reference`."""
    if not np.array_equal(estimate.cycles, reference.cycles):
        raise ValueError(
            f"'{estimate.source}' and '{reference.source}' cover different cycles"
            f" ({len(estimate)} vs {len(reference)} points)"
        )

    errors = estimate.soh_percent - reference.soh_percent
    abs_errors = np.abs(errors)
    return ErrorMetrics(
        mae=float(abs_errors.mean()),
        rmse=float(np.sqrt(np.mean(errors**2))),
        max_abs=float(abs_errors.max()),
        cycles=estimate.cycles,
        errors=errors,
    )


def error_distribution(metrics: ErrorMetrics) -> dict[str, float]:
    """Boxplot statistics of the per-cycle errors, whiskers at the most extreme errors within 1.5 IQR."""
    errors = metrics.errors
    q1, median, q3 = (float(value) for value in np.percentile(errors, [25, 50, 75]))
    iqr = q3 - q1
    inside = errors[(errors >= q1 - 1.5 * iqr) & (errors <= q3 + 1.5 * iqr)]
    return {
        "min": float(errors.min()),
        "whisker_low": float(inside.min()),
        "q1": q1,
        "median": median,
        "q3": q3,
        "whisker_high": float(inside.max()),
        "max": float(errors.max()),
    }


def build_soh_report(
    curves: Mapping[str, SohCurve],
    reference: str,
    threshold: float = 70.0,
    fits: Sequence[SymbolicFit] | None = None,
) -> dict:
    """Milestones, errors against `reference` and closed forms for a set of SoH curves.

    Args:
        curves (Mapping[str, SohCurve]): curves by source name
        reference (str): source the errors are measured against, "oracle" or "baseline_ir"
        threshold (float): SoH threshold (%) of the milestones
        fits (Sequence[SymbolicFit] | None): ranked symbolic fits to list under "formulas"

    Returns:
        dict: JSON-ready report
    """
    if reference not in curves:
        raise ValueError(f"Reference curve '{reference}' missing, have {sorted(curves)}")

    milestones = {source: crossing_cycle(curve, threshold) for source, curve in curves.items()}
    baseline_crossing = milestones.get("baseline_ir")
    leads = {
        source: baseline_crossing - crossing
        for source, crossing in milestones.items()
        if source != "baseline_ir" and crossing is not None and baseline_crossing is not None
    }

    errors, distributions = {}, {}
    for source, curve in curves.items():
        if source == reference:
            continue
        metrics = error_metrics(curve, curves[reference])
        errors[source] = metrics.to_dict()
        distributions[source] = error_distribution(metrics)

    return {
        "threshold_percent": threshold,
        "reference": reference,
        "milestones": milestones,
        "cycles_before_baseline": leads,
        "soh_at_eol": {source: float(curve.soh_percent[-1]) for source, curve in curves.items()},
        "errors": errors,
        "error_distribution": distributions,
        "formulas": [formula_entry(fit) for fit in fits or []],
    }


def save_soh_curves(curves: Sequence[SohCurve], pfout: PathLike) -> Path:
    columns = {
        "cycle": np.concatenate([curve.cycles for curve in curves]),
        "soh_percent": np.concatenate([curve.soh_percent for curve in curves]),
        "source": [curve.source for curve in curves for _ in range(len(curve))],
    }
    return write_csv_columns(columns, SOH_SCHEMA, pfout)


def save_oracle_csv(curve: SohCurve, pfout: PathLike) -> Path:
    return write_csv_columns({"cycle": curve.cycles, "soh_percent": curve.soh_percent}, ORACLE_SCHEMA, pfout)


def load_oracle_csv(pfin: PathLike) -> SohCurve:
    table = read_csv_table(pfin, ORACLE_SCHEMA)
    return SohCurve(
        cycles=table.column("cycle").to_numpy(),
        soh_percent=table.column("soh_percent").to_numpy(),
        source="oracle",
    )
