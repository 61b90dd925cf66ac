"""Lumped (small Biot number) thermal model of a single cell, stepped with explicit Euler at the
sampling interval. Used to generate synthetic cycling telemetry with a known resistance history."""

import math
from typing import Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from sohkan.data_utils import CycleDataset, CycleRecord, NormalizationParams
from sohkan.soh_analysis import SohCurve


class ThermalParams(BaseModel):
    """Physical constants of the lumped model. The defaults are a synthetic cylindrical-cell set with
    a thermal time constant of 600 s and a ~12 °C steady rise at 3 A / 50 mΩ."""

    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    h: float = Field(10.0, gt=0, description="Convective heat-transfer coefficient (W/m²/K)")
    area: float = Field(0.00375, gt=0, description="Cooled surface area (m²)")
    rho: float = Field(2500.0, gt=0, description="Density (kg/m³)")
    cp: float = Field(900.0, gt=0, description="Specific heat capacity (J/kg/K)")
    nu: float = Field(1.0e-5, gt=0, description="Cell volume (m³)")
    tau: float = Field(1.0, gt=0, description="Sampling interval (s)")
    t_ambient: float = Field(23.0, description="Ambient temperature (°C)")

    @model_validator(mode="after")
    def check_stability(self) -> "ThermalParams":
        ratio = self.convection_rate * self.tau
        if not 0 < ratio < 1:
            raise ValueError(
                f"Unstable discretization: h*A*tau/(rho*cp*nu) = {ratio:.6g} must lie in (0, 1)."
                " Decrease tau or increase the heat capacity."
            )
        return self

    @property
    def heat_capacity(self) -> float:
        """rho * cp * nu (J/K)"""
        return self.rho * self.cp * self.nu

    @property
    def convection_rate(self) -> float:
        """h * A / (rho * cp * nu) (1/s)"""
        return self.h * self.area / self.heat_capacity


class CycleProfile(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    current: float = Field(3.0, gt=0, description="CC charging current (A), 1C of a 3 Ah cell")
    cc_duration: float = Field(900.0, ge=0, description="Length of the CC phase (s)")
    rest_duration: float = Field(300.0, ge=0, description="Rest at zero current before the CC phase (s)")
    n_cycles: int = Field(997, ge=0, description="Index E of the end-of-life cycle; cycles 0..E are simulated")
    ocv: float = Field(3.7, description="Open-circuit voltage of the synthetic voltage trace (V)")


class ResistanceSchedule(BaseModel):
    """Series resistance per cycle, piecewise constant within a cycle.

    `linear` and `polynomial` evaluate R(k) = r_bol * (1 + sum_j coefficients[j] * (k/E)^(j+1)),
    `table` looks up R(k) = table[k] and `constant` keeps R(k) = r_bol.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    kind: Literal["constant", "linear", "polynomial", "table"] = "linear"
    r_bol: float = Field(0.05, gt=0, description="Resistance at the beginning of life (Ω)")
    # R grows by 45 % over the life: SoH(E) = 100/1.45 ≈ 69 % and 70 % is crossed at cycle 950 of 997
    coefficients: list[float] = Field(default_factory=lambda: [0.45])
    table: list[float] | None = None

    @model_validator(mode="after")
    def check_schedule(self) -> "ResistanceSchedule":
        if self.kind == "linear":
            if len(self.coefficients) != 1:
                raise ValueError(f"A linear schedule takes exactly one coefficient, got {self.coefficients}")
            if self.coefficients[0] < 0:
                raise ValueError("Degradation only increases resistance: the linear growth must be >= 0")
        elif self.kind == "table":
            if not self.table:
                raise ValueError("A table schedule needs a non-empty per-cycle table")
            if self.table[0] != self.r_bol:
                raise ValueError(f"R(0) must equal r_bol={self.r_bol}, the table starts at {self.table[0]}")
            if min(self.table) < self.r_bol:
                raise ValueError("Degradation only increases resistance: every table entry must be >= r_bol")
        return self

    @classmethod
    def for_eol_soh(cls, r_bol: float = 0.05, eol_soh: float = 0.7) -> "ResistanceSchedule":
        """Linear schedule whose power-based SoH reaches `eol_soh` (fraction) at the last cycle."""
        if not 0 < eol_soh <= 1:
            raise ValueError(f"eol_soh must be a fraction in (0, 1], got {eol_soh}")
        return cls(kind="linear", r_bol=r_bol, coefficients=[1 / eol_soh - 1])

    def resistance(self, cycles, n_cycles: int) -> np.ndarray:
        """Resistance (Ω) at the given cycle indices of a life that ends at cycle `n_cycles`."""
        cycles = np.atleast_1d(np.asarray(cycles))
        if self.kind == "constant":
            resistances = np.full(cycles.shape, self.r_bol, dtype=float)
        elif self.kind == "table":
            if cycles.max() >= len(self.table):
                raise ValueError(f"The table holds {len(self.table)} cycles, cycle {cycles.max()} was requested")
            resistances = np.asarray(self.table, dtype=float)[cycles.astype(int)]
        else:
            k_bar = cycles / n_cycles if n_cycles > 0 else np.zeros(cycles.shape)
            growth = sum(coef * k_bar ** (power + 1) for power, coef in enumerate(self.coefficients))
            resistances = self.r_bol * (1.0 + growth)

        if np.any(resistances < self.r_bol):
            raise ValueError(f"Schedule '{self.kind}' drops below r_bol={self.r_bol} Ω")
        return resistances


def step(temperature, params: ThermalParams, current, resistance):
    """One explicit Euler step of the lumped model. Works elementwise on arrays.

    Args:
        temperature: temperature at the current sample (°C)
        params (ThermalParams): the thermal constants
        current: current applied until the next sample (A)
        resistance: series resistance (Ω)

    Returns:
        the temperature one sampling interval later (°C)
    """
    if not np.all(np.isfinite(temperature)):
        raise ValueError(f"Non-finite input temperature: {temperature}")

    heat = current**2 * resistance - params.h * params.area * (temperature - params.t_ambient)
    return temperature + params.tau * heat / params.heat_capacity


def steady_state_rise(params: ThermalParams, current: float, resistance: float) -> float:
    """Steady-state temperature rise above ambient, I²R/(hA) (K)."""
    return current**2 * resistance / (params.h * params.area)


def _n_samples(duration: float, tau: float, name: str) -> int:
    n_steps = math.floor(duration / tau + 1e-9)
    if not math.isclose(n_steps * tau, duration, rel_tol=1e-9, abs_tol=1e-12):
        logger.warning(f"{name}={duration} s is not a multiple of tau={tau} s: truncated to {n_steps * tau} s")
    return n_steps


def _cycle_currents(params: ThermalParams, profile: CycleProfile) -> np.ndarray:
    """Rest at zero current, then the CC phase, then one closing sample at zero current."""
    n_rest = _n_samples(profile.rest_duration, params.tau, "rest_duration")
    n_cc = _n_samples(profile.cc_duration, params.tau, "cc_duration")
    currents = np.zeros(n_rest + n_cc + 1)
    currents[n_rest : n_rest + n_cc] = profile.current
    return currents


def _simulate_cycles(
    params: ThermalParams,
    profile: CycleProfile,
    resistances: np.ndarray,
    t0: float,
    progress: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrate all cycles at once, one row per cycle. Cycles are independent since each starts
    from `t0`.

    Returns:
        tuple of times (n_samples,), temperatures (n_cycles, n_samples), currents (n_samples,) and
        voltages (n_cycles, n_samples)
    """
    currents = _cycle_currents(params, profile)
    n_samples = len(currents)
    temps = np.empty((len(resistances), n_samples))
    temps[:, 0] = t0
    for idx in tqdm(range(n_samples - 1), desc="Simulating", unit="sample", disable=not progress):
        temps[:, idx + 1] = step(temps[:, idx], params, currents[idx], resistances)

    times = np.arange(n_samples) * params.tau
    voltages = profile.ocv + currents[None, :] * resistances[:, None]
    return times, temps, currents, voltages


def simulate_cycle(
    params: ThermalParams,
    profile: CycleProfile,
    r_k: float,
    t0: float | None = None,
    cycle_index: int = 0,
) -> CycleRecord:
    """Simulate one cycle at constant series resistance `r_k`, starting from `t0` (defaults to
    ambient). The voltage trace is OCV + I*R_k, so it jumps by I*R_k when the CC phase starts."""
    if not r_k > 0:
        raise ValueError(f"The series resistance must be positive, got {r_k}")

    t0 = params.t_ambient if t0 is None else t0
    times, temps, currents, voltages = _simulate_cycles(params, profile, np.array([r_k], dtype=float), t0)
    return CycleRecord(
        cycle_index=cycle_index,
        t=times,
        temp=temps[0],
        current=currents.copy(),
        voltage=voltages[0],
        t_ambient=params.t_ambient,
    )


def simulate_life(
    params: ThermalParams,
    profile: CycleProfile,
    schedule: ResistanceSchedule,
    progress: bool = False,
) -> tuple[CycleDataset, SohCurve]:
    """Simulate cycles 0..E with the resistance of each cycle taken from `schedule`.

    Args:
        params (ThermalParams): the thermal constants
        profile (CycleProfile): current, phase durations and the end-of-life cycle E
        schedule (ResistanceSchedule): resistance growth over the cycles
        progress (bool): show a progress bar

    Returns:
        tuple[CycleDataset, SohCurve]: the telemetry and the oracle power-based SoH, 100 * R(0) / R(k)
    """
    cycles = np.arange(profile.n_cycles + 1)
    resistances = schedule.resistance(cycles, profile.n_cycles)
    logger.info(
        f"Simulating {len(cycles):,} cycles: R from {resistances[0]:.5g} to {resistances[-1]:.5g} Ω,"
        f" steady rise {steady_state_rise(params, profile.current, resistances[0]):.3g} °C at BOL"
    )

    times, temps, currents, voltages = _simulate_cycles(params, profile, resistances, params.t_ambient, progress)
    records = tuple(
        CycleRecord(
            cycle_index=int(cycle),
            t=times,
            temp=temps[cycle],
            current=currents,
            voltage=voltages[cycle],
            t_ambient=params.t_ambient,
        )
        for cycle in cycles
    )
    oracle = SohCurve(cycles=cycles, soh_percent=100.0 * resistances[0] / resistances, source="oracle")
    return CycleDataset(records), oracle


def derived_constants(params: ThermalParams, norm: NormalizationParams) -> tuple[float, float]:
    """Coefficients of the normalized single step T̄' = gamma * T̄ + D_k + xi.

    Returns:
        tuple[float, float]: gamma = 1 - h*A*tau/(rho*cp*nu) and
        xi = h*A*tau*(T_ambient - t_min)/(rho*cp*nu*delta_T)
    """
    rate = params.convection_rate * params.tau
    return 1.0 - rate, rate * (params.t_ambient - norm.t_min) / norm.delta


def heat_generation_constant(params: ThermalParams, norm: NormalizationParams, current: float, resistance):
    """Dimensionless heat input per step, D_k = tau * I²R / (rho*cp*nu*delta_T)."""
    return params.tau * current**2 * resistance / (params.heat_capacity * norm.delta)


def normalized_step(t_bar, d_k, gamma: float, xi: float):
    return gamma * t_bar + d_k + xi


def closed_form_horizon(t_bar, d_k, gamma: float, xi: float, n: int):
    """N normalized steps at once: gamma^N * T̄ + (D_k + xi) * sum_{j<N} gamma^j.

    Args:
        t_bar: normalized temperature at the start of the horizon
        d_k: heat-generation constant of the cycle
        gamma (float): decay factor, >= 0
        xi (float): ambient forcing constant
        n (int): horizon in samples, >= 1

    Returns:
        the normalized temperature N samples later
    """
    if n < 1:
        raise ValueError(f"The horizon must be at least one sample, got {n}")
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")

    if gamma == 1.0:
        geometric = float(n)
    elif gamma == 0.0:
        geometric = 1.0
    else:
        # (1 - gamma^N) / (1 - gamma) without cancellation for gamma close to 1
        geometric = -math.expm1(n * math.log1p(gamma - 1.0)) / (1.0 - gamma)
    return gamma**n * t_bar + (d_k + xi) * geometric
