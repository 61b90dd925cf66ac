import numpy as np
import pytest
from pydantic import ValidationError

from sohkan.data_utils import NormalizationParams
from sohkan.thermal_sim import (
    CycleProfile,
    ResistanceSchedule,
    ThermalParams,
    closed_form_horizon,
    derived_constants,
    heat_generation_constant,
    normalized_step,
    simulate_cycle,
    simulate_life,
    steady_state_rise,
    step,
)


# h*A/(rho*cp*nu) = 0.001 1/s with a heat capacity of 1000 J/K
UNIT_PARAMS = ThermalParams(h=10.0, area=0.1, rho=1000.0, cp=1000.0, nu=1e-3, tau=1.0, t_ambient=23.0)


@pytest.mark.parametrize(
    "temperature, current, resistance, expected",
    [
        # Equilibrium: no forcing at ambient
        (23.0, 0.0, 0.05, 23.0),
        # I²R/C = 0.005 K/s for one second
        (23.0, 1.0, 5.0, 23.005),
        # Pure convection: 0.001 * (33 - 23) = 0.01 K lost
        (33.0, 0.0, 5.0, 32.99),
    ],
)
def test_step(temperature, current, resistance, expected):
    assert step(temperature, UNIT_PARAMS, current, resistance) == pytest.approx(expected, abs=1e-12)


def test_step_rejects_non_finite_temperature():
    with pytest.raises(ValueError, match="Non-finite"):
        step(np.nan, UNIT_PARAMS, 1.0, 0.05)


def test_unstable_discretization_is_rejected():
    with pytest.raises(ValidationError, match="Unstable"):
        ThermalParams(tau=1000.0)


def test_long_cc_phase_approaches_steady_state(thermal_params):
    profile = CycleProfile(cc_duration=6000.0, rest_duration=0.0)
    record = simulate_cycle(thermal_params, profile, 0.05)
    cc = record.temp[:-1]

    assert np.all(np.diff(cc) >= 0)
    target = thermal_params.t_ambient + steady_state_rise(thermal_params, profile.current, 0.05)
    assert cc[-1] < target
    assert cc[-1] == pytest.approx(target, abs=0.01)


def test_doubled_resistance_doubles_the_rise(thermal_params):
    profile = CycleProfile(cc_duration=600.0, rest_duration=0.0)
    rise_single = simulate_cycle(thermal_params, profile, 0.05).temp[-1] - thermal_params.t_ambient
    rise_double = simulate_cycle(thermal_params, profile, 0.10).temp[-1] - thermal_params.t_ambient

    assert rise_double == pytest.approx(2 * rise_single, rel=1e-9)
    single, double = (steady_state_rise(thermal_params, 3.0, r) for r in (0.05, 0.10))
    assert double == pytest.approx(2 * single)


def test_rest_only_profile_decays_toward_ambient(thermal_params):
    profile = CycleProfile(cc_duration=0.0, rest_duration=120.0)
    record = simulate_cycle(thermal_params, profile, 0.05, t0=30.0)

    assert np.all(np.diff(record.temp) < 0)
    assert np.all(record.temp > thermal_params.t_ambient)
    assert np.all(record.current == 0)


def test_cycle_layout(thermal_params):
    profile = CycleProfile(cc_duration=20.0, rest_duration=5.0)
    record = simulate_cycle(thermal_params, profile, 0.05, cycle_index=3)

    assert record.cycle_index == 3
    assert len(record) == 5 + 20 + 1
    assert np.all(record.current[:5] == 0)
    assert np.all(record.current[5:25] == profile.current)
    assert record.current[-1] == 0
    # The rest phase starts at ambient and stays there
    assert np.all(record.temp[:6] == thermal_params.t_ambient)
    # IR jump at the start of the CC phase
    assert record.voltage[5] - record.voltage[4] == pytest.approx(profile.current * 0.05)


def test_truncated_duration_warns(thermal_params, log_messages):
    profile = CycleProfile(cc_duration=10.5, rest_duration=0.0)
    record = simulate_cycle(thermal_params, profile, 0.05)

    assert len(record) == 10 + 1
    assert any("not a multiple of tau" in message for message in log_messages)


def test_simulate_cycle_rejects_non_positive_resistance(thermal_params):
    with pytest.raises(ValueError, match="positive"):
        simulate_cycle(thermal_params, CycleProfile(), 0.0)


def test_constant_schedule_gives_flat_oracle(thermal_params, small_profile):
    dataset, oracle = simulate_life(thermal_params, small_profile, ResistanceSchedule(kind="constant"))

    assert len(dataset) == small_profile.n_cycles + 1
    assert np.all(oracle.soh_percent == 100.0)
    # Same resistance every cycle, so every cycle is identical
    assert np.array_equal(dataset[0].temp, dataset[small_profile.n_cycles].temp)


@pytest.mark.parametrize(
    "schedule, expected_eol_soh",
    [
        (ResistanceSchedule(coefficients=[0.4286]), 100 / 1.4286),
        (ResistanceSchedule.for_eol_soh(0.05, 0.7), 70.0),
        (ResistanceSchedule.for_eol_soh(0.05, 0.8), 80.0),
    ],
)
def test_linear_schedule_oracle(thermal_params, small_profile, schedule, expected_eol_soh):
    dataset, oracle = simulate_life(thermal_params, small_profile, schedule)

    assert oracle.soh_percent[0] == 100.0
    assert oracle.soh_percent[-1] == pytest.approx(expected_eol_soh, abs=1e-9)
    assert np.all(np.diff(oracle.soh_percent) < 0)
    # More resistance means more heat: the end of the CC phase gets warmer every cycle
    final_temps = np.array([record.temp[-1] for record in dataset])
    assert np.all(np.diff(final_temps) > 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "linear", "coefficients": [-0.1]},
        {"kind": "linear", "coefficients": [0.1, 0.2]},
        {"kind": "table", "r_bol": 0.05, "table": [0.06, 0.07]},
        {"kind": "table", "r_bol": 0.05, "table": [0.05, 0.04]},
        {"kind": "table", "r_bol": 0.05},
    ],
)
def test_invalid_schedules(kwargs):
    with pytest.raises(ValidationError):
        ResistanceSchedule(**kwargs)


def test_table_schedule():
    schedule = ResistanceSchedule(kind="table", r_bol=0.05, table=[0.05, 0.06, 0.08])
    assert np.allclose(schedule.resistance([0, 1, 2], 2), [0.05, 0.06, 0.08])
    with pytest.raises(ValueError, match="holds 3 cycles"):
        schedule.resistance([3], 3)


def test_closed_form_example():
    assert closed_form_horizon(0.5, 0.1, 0.9, 0.0, 3) == pytest.approx(0.9**3 * 0.5 + 0.1 * (1 + 0.9 + 0.81))
    assert closed_form_horizon(0.5, 0.1, 0.9, 0.0, 3) == pytest.approx(0.6355)


@pytest.mark.parametrize("t_bar, d_k, gamma, xi", [(0.3, 0.02, 0.95, 0.01), (1.2, 0.0, 0.5, -0.2)])
def test_single_step_reduction(t_bar, d_k, gamma, xi):
    assert closed_form_horizon(t_bar, d_k, gamma, xi, 1) == pytest.approx(normalized_step(t_bar, d_k, gamma, xi))


def test_unit_gamma_is_linear_growth():
    assert closed_form_horizon(0.2, 0.01, 1.0, 0.0, 50) == pytest.approx(0.2 + 50 * 0.01)


@pytest.mark.parametrize("n", [2, 17, 100])
def test_closed_form_matches_iterated_steps(n):
    t_bar = 0.4
    for _ in range(n):
        t_bar = normalized_step(t_bar, 0.003, 0.998, 0.001)
    assert closed_form_horizon(0.4, 0.003, 0.998, 0.001, n) == pytest.approx(t_bar, rel=1e-12)


def test_closed_form_matches_iteration_on_random_draws():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        gamma = rng.uniform(0.0, 1.0)
        d_k, xi = rng.uniform(-0.01, 0.01, 2)
        t_bar0 = rng.uniform(0.0, 1.0)
        n = int(rng.integers(1, 1001))

        t_bar = t_bar0
        for _ in range(n):
            t_bar = normalized_step(t_bar, d_k, gamma, xi)
        assert abs(closed_form_horizon(t_bar0, d_k, gamma, xi, n) - t_bar) < 1e-10


def test_closed_form_matches_simulator(thermal_params):
    profile = CycleProfile(cc_duration=300.0, rest_duration=10.0)
    record = simulate_cycle(thermal_params, profile, 0.05, t0=25.0)
    norm = NormalizationParams(t_min=20.0, t_max=40.0)
    gamma, xi = derived_constants(thermal_params, norm)
    d_k = heat_generation_constant(thermal_params, norm, profile.current, 0.05)

    start, horizon = 10, 100
    expected = closed_form_horizon(norm.normalize(record.temp[start]), d_k, gamma, xi, horizon)
    assert norm.normalize(record.temp[start + horizon]) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("n, gamma", [(0, 0.9), (3, -0.1)])
def test_closed_form_rejects_invalid_arguments(n, gamma):
    with pytest.raises(ValueError):
        closed_form_horizon(0.5, 0.1, gamma, 0.0, n)
