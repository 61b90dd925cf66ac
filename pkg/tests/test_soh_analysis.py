import numpy as np
import pytest

from sohkan.data_utils import CycleDataset, CycleRecord, HorizonPair
from sohkan.kan import Activation, KanModel, SplineGrid
from sohkan.soh_analysis import (
    SOH_SCHEMA,
    SohCurve,
    baseline_ir_soh,
    build_soh_report,
    closed_form_curve,
    crossing_cycle,
    error_distribution,
    error_metrics,
    estimate_a2_offset,
    ir_drop_resistance,
    load_oracle_csv,
    save_oracle_csv,
    save_soh_curves,
    soh_at_cycle,
    soh_closed_form,
    soh_from_a2,
)
from sohkan.symbolic import ActivationCurve, OrientationError, SymbolicFit, fit_power_form
from sohkan.thermal_sim import ResistanceSchedule, simulate_life
from sohkan.utils import read_csv_table


GRID = SplineGrid()
CYCLES = np.arange(101)


def _linear_curve(slope, source):
    return SohCurve(cycles=CYCLES, soh_percent=100.0 - slope * CYCLES, source=source)


def _power_fit(a, b, n=3):
    return SymbolicFit(form=f"power_{n}", params={"a": a, "b": b}, r2=1.0, n_params=2, degree=n)


def _linear_a1_model(slope, intercept):
    # Coefficients at the Greville abscissae reproduce a line exactly with cubic B-splines
    greville = (np.arange(GRID.n_basis) - 1) * (GRID.hi - GRID.lo) / GRID.intervals + GRID.lo
    return KanModel(
        a1=Activation(w_silu=0.0, coeffs=slope * greville + intercept, grid=GRID),
        a2=Activation(w_silu=1.0, coeffs=np.zeros(GRID.n_basis), grid=GRID),
    )


def test_ir_drop_resistance():
    current = np.array([0.0, 0.0, 2.0, 2.0])
    voltage = np.array([3.7, 3.7, 3.75, 3.75])
    assert ir_drop_resistance(current, voltage) == pytest.approx(0.025)
    assert ir_drop_resistance(np.zeros(4), voltage) is None


def test_baseline_matches_oracle(small_dataset, small_oracle):
    baseline = baseline_ir_soh(small_dataset)
    assert baseline.source == "baseline_ir"
    assert np.array_equal(baseline.cycles, small_oracle.cycles)
    assert np.allclose(baseline.soh_percent, small_oracle.soh_percent, atol=1e-6)


def test_baseline_of_constant_resistance_is_flat(thermal_params, small_profile):
    dataset, _ = simulate_life(thermal_params, small_profile, ResistanceSchedule(kind="constant"))
    assert np.allclose(baseline_ir_soh(dataset).soh_percent, 100.0)


def test_baseline_needs_a_current_step():
    record = CycleRecord(
        cycle_index=0,
        t=np.arange(3, dtype=float),
        temp=np.full(3, 23.0),
        current=np.zeros(3),
        voltage=np.full(3, 3.7),
        t_ambient=23.0,
    )
    with pytest.raises(ValueError, match="no current step"):
        baseline_ir_soh(CycleDataset((record,)))


def test_soh_from_a2():
    k_bar = np.linspace(0.0, 1.0, 11)
    soh = soh_from_a2(ActivationCurve(k_bar=k_bar, values=(2.0 + k_bar) ** 2))

    assert soh.source == "spline_a2"
    assert np.array_equal(soh.cycles, np.arange(11))
    assert soh.soh_percent[0] == 100.0
    assert soh.soh_percent[-1] == pytest.approx(100 * 4 / 9)


def test_soh_from_constant_a2_is_flat():
    curve = ActivationCurve(k_bar=np.linspace(0.0, 1.0, 5), values=np.full(5, -0.3))
    assert np.allclose(soh_from_a2(curve).soh_percent, 100.0)


def test_soh_from_a2_is_scale_invariant():
    k_bar = np.linspace(0.0, 1.0, 21)
    values = 0.2 + 0.1 * k_bar**2
    first = soh_from_a2(ActivationCurve(k_bar=k_bar, values=values))
    second = soh_from_a2(ActivationCurve(k_bar=k_bar, values=7.5 * values))
    assert np.allclose(first.soh_percent, second.soh_percent)


def test_anchored_soh_subtracts_offset():
    k_bar = np.linspace(0.0, 1.0, 21)
    shape = 0.2 + 0.1 * k_bar
    raw = soh_from_a2(ActivationCurve(k_bar=k_bar, values=shape))
    anchored = soh_from_a2(ActivationCurve(k_bar=k_bar, values=shape - 0.15), "anchored", offset=-0.15)

    assert anchored.source == "spline_a2_anchored"
    assert np.allclose(anchored.soh_percent, raw.soh_percent)


@pytest.mark.parametrize("values", [np.linspace(1.0, -1.0, 11), np.r_[1.0, np.zeros(10)]])
def test_a2_crossing_zero(values):
    curve = ActivationCurve(k_bar=np.linspace(0.0, 1.0, 11), values=values)
    with pytest.raises(OrientationError, match="offset calibration required"):
        soh_from_a2(curve)


def test_unknown_offset_handling():
    curve = ActivationCurve(k_bar=[0.0, 1.0], values=[1.0, 2.0])
    with pytest.raises(ValueError, match="offset_handling"):
        soh_from_a2(curve, "shifted")


def test_closed_form_at_start_is_100():
    assert soh_closed_form(_power_fit(2.0, -0.5), 0.0) == pytest.approx(100.0)


def test_closed_form_flips_shrinking_base(log_messages):
    soh = soh_closed_form(_power_fit(2.0, 0.5), np.array([0.0, 1.0]))
    assert np.allclose(soh, [100.0, 100 * 8 / 2.5**3])
    assert any("flipping" in message for message in log_messages)


def test_closed_form_curve():
    curve = closed_form_curve(_power_fit(1.0, -0.25, n=2), 4)
    assert curve.source == "power_form_2"
    assert curve.params == {"a": 1.0, "b": -0.25, "n": 2}
    assert np.array_equal(curve.cycles, np.arange(5))
    assert curve.soh_percent[-1] == pytest.approx(100 / 1.25**2)
    assert np.all(np.diff(curve.soh_percent) < 0)


def test_closed_form_agrees_with_spline_soh():
    n_eol = 1000
    k_bar = np.arange(n_eol + 1) / n_eol
    curve = ActivationCurve(k_bar=k_bar, values=(1.2 + 0.4 * k_bar) ** 3)
    fit = fit_power_form(curve, 3)

    assert fit.r2 >= 0.999
    spline = soh_from_a2(curve)
    closed = closed_form_curve(fit, n_eol)
    assert np.max(np.abs(closed.soh_percent - spline.soh_percent)) < 1.0


def test_closed_form_needs_a_power_fit():
    affine = SymbolicFit(form="affine", params={"a": 1.0, "b": 1.0}, r2=1.0, n_params=2, degree=1)
    with pytest.raises(ValueError, match="power-form"):
        closed_form_curve(affine, 10)


@pytest.mark.parametrize(
    "curve, threshold, expected",
    [
        (_linear_curve(0.4, "oracle"), 70.2, 75),
        (_linear_curve(0.0, "oracle"), 70.0, None),
        (_linear_curve(0.4, "oracle"), 100.0, 0),
    ],
)
def test_crossing_cycle(curve, threshold, expected):
    assert crossing_cycle(curve, threshold) == expected


def test_soh_at_cycle():
    curve = _linear_curve(0.5, "oracle")
    assert soh_at_cycle(curve, 20) == pytest.approx(90.0)
    with pytest.raises(ValueError, match="not part of"):
        soh_at_cycle(curve, 500)


def test_error_metrics():
    reference = _linear_curve(0.3, "oracle")
    assert error_metrics(reference, reference).to_dict() == {"mae": 0.0, "rmse": 0.0, "max": 0.0}

    shifted = SohCurve(cycles=CYCLES, soh_percent=reference.soh_percent + 2.0, source="spline_a2")
    metrics = error_metrics(shifted, reference)
    assert metrics.mae == pytest.approx(2.0)
    assert metrics.rmse == pytest.approx(2.0)
    assert metrics.max_abs == pytest.approx(2.0)


def test_error_metrics_needs_matching_cycles():
    short = SohCurve(cycles=np.arange(10), soh_percent=np.full(10, 100.0), source="spline_a2")
    with pytest.raises(ValueError, match="different cycles"):
        error_metrics(short, _linear_curve(0.3, "oracle"))


def test_error_distribution():
    cycles = np.arange(5)
    reference = SohCurve(cycles=cycles, soh_percent=np.full(5, 50.0), source="oracle")
    estimate = SohCurve(cycles=cycles, soh_percent=[51.0, 52.0, 53.0, 54.0, 150.0], source="spline_a2")
    stats = error_distribution(error_metrics(estimate, reference))

    assert (stats["q1"], stats["median"], stats["q3"]) == (2.0, 3.0, 4.0)
    assert stats["whisker_low"] == 1.0
    # 100 lies beyond q3 + 1.5 * IQR = 7
    assert stats["whisker_high"] == 4.0
    assert stats["max"] == 100.0


def test_build_soh_report():
    curves = {
        "oracle": _linear_curve(0.4, "oracle"),
        "baseline_ir": _linear_curve(0.35, "baseline_ir"),
        "spline_a2": _linear_curve(0.5, "spline_a2"),
    }
    report = build_soh_report(curves, "oracle", threshold=70.2, fits=[_power_fit(2.0, -0.5)])

    assert report["milestones"] == {"oracle": 75, "baseline_ir": 86, "spline_a2": 60}
    assert report["cycles_before_baseline"] == {"oracle": 11, "spline_a2": 26}
    assert set(report["errors"]) == {"baseline_ir", "spline_a2"}
    assert report["errors"]["spline_a2"]["max"] == pytest.approx(10.0)
    assert report["soh_at_eol"]["oracle"] == pytest.approx(60.0)
    assert report["formulas"][0]["form"] == "power_3"

    with pytest.raises(ValueError, match="Reference curve"):
        build_soh_report(curves, "missing")


def test_report_records_flipped_power_forms(log_messages):
    curves = {"oracle": _linear_curve(0.4, "oracle")}
    exp_fit = SymbolicFit(form="exp", params={"a": 1.0, "b": -1.0, "c": 0.0}, r2=0.5, n_params=3)
    fits = [_power_fit(2.0, 0.5), _power_fit(2.0, -0.5, n=2), exp_fit]
    flipped, kept, other = build_soh_report(curves, "oracle", fits=fits)["formulas"]

    assert flipped["b_flipped"]
    assert flipped["params"] == {"a": 2.0, "b": 0.5}
    assert flipped["soh_params"] == {"a": 2.0, "b": -0.5, "n": 3}
    assert flipped["soh_formula"].startswith("SoH(k) = 100 * (2)^3 / (2 - -0.5*k/E)^3")
    assert any("flipping" in message for message in log_messages)

    assert not kept["b_flipped"]
    assert kept["soh_params"] == {"a": 2.0, "b": -0.5, "n": 2}
    assert "b_flipped" not in other


def test_estimate_a2_offset():
    model = _linear_a1_model(0.8, 0.05)
    pairs = [HorizonPair(cycle=idx, t_bar=t_bar, k_bar=0.0, target=0.0) for idx, t_bar in enumerate([0.1, 0.5, 0.9])]
    estimate = estimate_a2_offset(model, pairs, t_bar_ambient=0.0, horizon_n=10)

    assert estimate.slope == pytest.approx(0.8)
    assert estimate.intercept == pytest.approx(0.05)
    assert estimate.offset == pytest.approx(-0.05)
    assert estimate.gamma == pytest.approx(0.8**0.1)
    assert not estimate.degenerate


def test_estimate_a2_offset_without_input_spread(log_messages):
    model = _linear_a1_model(0.8, 0.05)
    pairs = [HorizonPair(cycle=idx, t_bar=0.0, k_bar=idx / 4, target=0.0) for idx in range(5)]
    estimate = estimate_a2_offset(model, pairs, t_bar_ambient=0.0, horizon_n=10)

    assert estimate.degenerate
    assert estimate.gamma is None
    assert estimate.slope == pytest.approx(0.8)
    assert estimate.offset == pytest.approx(-0.05)
    assert any("span no temperature range" in message for message in log_messages)


def test_estimate_a2_offset_needs_pairs():
    with pytest.raises(ValueError, match="training pairs"):
        estimate_a2_offset(_linear_a1_model(1.0, 0.0), [], 0.0)


def test_oracle_csv(tmp_path, small_oracle):
    loaded = load_oracle_csv(save_oracle_csv(small_oracle, tmp_path / "oracle.csv"))
    assert loaded.source == "oracle"
    assert np.array_equal(loaded.cycles, small_oracle.cycles)
    assert np.allclose(loaded.soh_percent, small_oracle.soh_percent, rtol=1e-15)


def test_save_soh_curves(tmp_path):
    curves = [_linear_curve(0.4, "oracle"), _linear_curve(0.5, "spline_a2")]
    table = read_csv_table(save_soh_curves(curves, tmp_path / "soh.csv"), SOH_SCHEMA)
    assert table.num_rows == 2 * len(CYCLES)
    assert table.column("source").to_pylist()[len(CYCLES)] == "spline_a2"


def test_soh_curve_rejects_non_positive_values():
    with pytest.raises(ValueError, match="finite and positive"):
        SohCurve(cycles=[0, 1], soh_percent=[100.0, 0.0], source="spline_a2")
