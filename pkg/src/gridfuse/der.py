"""DC-side equivalent-circuit models for utility-scale PV and battery storage.

Single-diode PV, zeroth-order battery with a capacitor-based state-of-charge
subcircuit, sigmoid inverter efficiency curves, and the AC/DC power-balance
coupling residuals.

Device quantities are carried in kV / kA / MW (resistances therefore in
ohms); AC quantities are per-unit, and DC power converts to per-unit as
p_pu = p_mw / base_mva. Everything here is a pure function over immutable
parameter records.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .exceptions import GridfuseError

# Diode exponent clamp: beyond this the exponential is extended linearly
# (C1 continuous) so Newton steps stay finite at any iterate.
EXP_CLAMP = 40.0


class SocValidityWarning(UserWarning):
    """The linear OCV map was evaluated outside its 20-80% validity band."""


@dataclass(frozen=True)
class PvSystem:
    """Aggregated single-diode model of one inverter's PV field.

    ``a`` is the folded diode constant nkT/q in kV; ``n_parallel_scale``
    scales module-level photocurrent data up to the aggregate.
    """

    bus: int
    r_s: float
    r_sh: float
    i_0: float
    a: float
    n_parallel_scale: float = 1.0

    def __post_init__(self):
        for name in ("r_s", "r_sh", "i_0", "a"):
            if getattr(self, name) <= 0:
                raise GridfuseError(f"PvSystem.{name} must be positive")


@dataclass(frozen=True)
class PvState:
    """Operating point of a PV circuit (kV / kA / MW)."""

    v_sh: float
    v_pv: float
    i_pv: float
    i_d: float
    i_ph: float
    p_pv: float


@dataclass(frozen=True)
class BatterySystem:
    """Zeroth-order battery model plus its SoC subcircuit.

    ``c_cap`` is the equivalent capacitance (kA*s per volt of SoC),
    ``ocv_a``/``ocv_b`` the linear OCV map intercept/slope in kV,
    ``dispatch`` the externally scheduled charging/discharging flag per
    window, ``dt`` the window length in seconds. ``r_sd`` may be inf.
    """

    bus: int
    c_cap: float
    r_se: float
    r_sd: float
    ocv_a: float
    ocv_b: float
    dispatch: tuple[str, ...] = ()
    dt: float = 300.0

    def __post_init__(self):
        if self.c_cap <= 0 or self.r_se <= 0 or not self.r_sd > 0:
            raise GridfuseError("battery capacitance and resistances must be positive")
        if self.ocv_b == 0:
            raise GridfuseError("degenerate OCV map")
        for flag in self.dispatch:
            if flag not in ("charging", "discharging"):
                raise GridfuseError(f"unknown dispatch flag {flag!r}")


@dataclass(frozen=True)
class BatteryState:
    """Operating point of a battery circuit; i_bt > 0 means discharging."""

    v_soc: float
    v_oc: float
    v_bt: float
    i_bt: float
    p_bt: float


@dataclass(frozen=True)
class InverterCurve:
    """Truncated-sigmoid efficiency curve eta(p) = m / (1 + exp(-gamma p)).

    ``kind`` distinguishes inversion (DC->AC) from rectification (AC->DC).
    """

    m: float
    gamma: float
    kind: str = "inversion"

    def __post_init__(self):
        if not 0 < self.m <= 2:
            raise GridfuseError("inverter asymptote must be in (0, 2]")
        if self.gamma <= 0:
            raise GridfuseError("inverter gamma must be positive")
        if self.kind not in ("inversion", "rectification"):
            raise GridfuseError(f"unknown inverter curve kind {self.kind!r}")


def diode_current(v_sh, i_0: float, a: float):
    """Shockley diode current i_0 * (exp(v_sh / a) - 1).

    The exponent is clamped at EXP_CLAMP with a C1 linear extension, so the
    function is total, strictly increasing and smooth enough for Newton.
    Accepts scalars or arrays.
    """
    if a <= 0 or i_0 <= 0:
        raise GridfuseError("diode parameters must be positive")
    u = np.asarray(v_sh, dtype=float) / a
    capped = np.exp(np.minimum(u, EXP_CLAMP))
    peak = math.exp(EXP_CLAMP)
    out = i_0 * np.where(u <= EXP_CLAMP, capped - 1.0, peak * (1.0 + (u - EXP_CLAMP)) - 1.0)
    return float(out) if np.isscalar(v_sh) else out


def diode_current_derivative(v_sh, i_0: float, a: float):
    """d(diode_current)/d(v_sh), continuous across the clamp junction."""
    u = np.asarray(v_sh, dtype=float) / a
    slope = i_0 / a * np.exp(np.minimum(u, EXP_CLAMP))
    return float(slope) if np.isscalar(v_sh) else slope


def diode_current_second_derivative(v_sh, i_0: float, a: float):
    """Second derivative of the diode current; zero in the clamped region."""
    u = np.asarray(v_sh, dtype=float) / a
    curv = np.where(u <= EXP_CLAMP, i_0 / a**2 * np.exp(np.minimum(u, EXP_CLAMP)), 0.0)
    return float(curv) if np.isscalar(v_sh) else curv


@dataclass(frozen=True)
class PvMeasurement:
    """DC terminal meter readings plus the photocurrent pseudo-measurement."""

    z_v: float
    z_i: float
    z_ph: float
    sigma: float
    biased_v: bool = False
    biased_i: bool = False
    biased_ph: bool = False

    @property
    def weight(self) -> float:
        return 1.0 / self.sigma**2 if self.sigma > 0 else 1.0


@dataclass(frozen=True)
class BatteryMeasurement:
    """DC terminal meter readings for one estimation window."""

    z_v: float
    z_i: float
    sigma: float
    biased_v: bool = False
    biased_i: bool = False

    @property
    def weight(self) -> float:
        return 1.0 / self.sigma**2 if self.sigma > 0 else 1.0


def pv_residuals(state: PvState, sys: PvSystem, meas: PvMeasurement, noise):
    """Residuals of the measurement-laden PV circuit.

    ``noise`` is (n_ph, n_i, n_v). The four entries vanish simultaneously
    iff the state and noise are consistent with the measured circuit:

        r1: photocurrent KCL   -z_PH - n_PH + I_D + V_SH/R_SH + I_PV
        r2: current meter      -I_PV + z_I + n_I
        r3: series resistor     I_PV - (V_SH - V_PV)/R_S
        r4: voltage meter      -V_PV + z_V + n_V
    """
    n_ph, n_i, n_v = noise
    i_d = diode_current(state.v_sh, sys.i_0, sys.a)
    r1 = -meas.z_ph - n_ph + i_d + state.v_sh / sys.r_sh + state.i_pv
    r2 = -state.i_pv + meas.z_i + n_i
    r3 = state.i_pv - (state.v_sh - state.v_pv) / sys.r_s
    r4 = -state.v_pv + meas.z_v + n_v
    return np.array([r1, r2, r3, r4])


def battery_residuals(state: BatteryState, sys: BatterySystem, meas: BatteryMeasurement, noise):
    """Residuals of the measurement-laden battery terminal circuit.

    ``noise`` is (n_i, n_v).

        r1: current meter      -I_Bt + z_I + n_I
        r2: series resistor     (V_Bt - V_OC)/R_SE + I_Bt
        r3: voltage meter      -V_Bt + z_V + n_V
    """
    n_i, n_v = noise
    r1 = -state.i_bt + meas.z_i + n_i
    r2 = (state.v_bt - state.v_oc) / sys.r_se + state.i_bt
    r3 = -state.v_bt + meas.z_v + n_v
    return np.array([r1, r2, r3])


def soc_update_residual(v_oc_t, v_oc_prev, v_bt_t, v_bt_prev, sys: BatterySystem):
    """Trapezoidal SoC-update constraint expressed in open-circuit voltages.

    Self-discharge is neglected here (the estimator-side constraint); the
    residual is zero along the trapezoidal SoC trajectory:

        (V_OC(t) - V_OC(t-dt))/b
          + dt/(2C) * [(V_OC(t) - V_Bt(t))/R_SE + (V_OC(t-dt) - V_Bt(t-dt))/R_SE]
    """
    if sys.ocv_b == 0:
        raise GridfuseError("degenerate OCV map")
    i_now = (v_oc_t - v_bt_t) / sys.r_se
    i_prev = (v_oc_prev - v_bt_prev) / sys.r_se
    return (v_oc_t - v_oc_prev) / sys.ocv_b + sys.dt / (2.0 * sys.c_cap) * (i_now + i_prev)


def ocv_from_soc(v_soc: float, sys: BatterySystem) -> float:
    """Linear OCV map V_OC = a + b * V_SoC; warns outside the 20-80% band."""
    if sys.ocv_b == 0:
        raise GridfuseError("degenerate OCV map")
    if not 0.0 <= v_soc <= 1.0:
        raise GridfuseError(f"SoC {v_soc} outside [0, 1]")
    if not 0.2 <= v_soc <= 0.8:
        warnings.warn("SoC outside the linear OCV validity band", SocValidityWarning)
    return sys.ocv_a + sys.ocv_b * v_soc


def soc_from_ocv(v_oc: float, sys: BatterySystem) -> float:
    """Exact inverse of ocv_from_soc."""
    if sys.ocv_b == 0:
        raise GridfuseError("degenerate OCV map")
    v_soc = (v_oc - sys.ocv_a) / sys.ocv_b
    if not 0.0 <= v_soc <= 1.0:
        raise GridfuseError(f"SoC {v_soc} outside [0, 1]")
    if not 0.2 <= v_soc <= 0.8:
        warnings.warn("SoC outside the linear OCV validity band", SocValidityWarning)
    return v_soc


def inverter_efficiency(p: float, curve: InverterCurve) -> float:
    """Sigmoid efficiency at converter power p >= 0 (MW)."""
    if p < 0:
        raise GridfuseError("negative converter power")
    return curve.m / (1.0 + math.exp(-curve.gamma * p))


def fit_inverter_curve(p_low, eta_low, p_rated, eta_rated, kind="inversion") -> InverterCurve:
    """Fit (M, gamma) through two datasheet points (p, eta).

    Both points are matched exactly; of the two algebraic solutions the
    sharper-knee branch (larger gamma, M just above eta_rated) is taken,
    which is the shape real inverter curves have.
    """
    if not (0 < p_low < p_rated):
        raise GridfuseError("datasheet powers must satisfy 0 < p_low < p_rated")
    if not (0 < eta_low < eta_rated < 1):
        raise GridfuseError("datasheet efficiencies must satisfy 0 < eta_low < eta_rated < 1")

    def mismatch(gamma):
        return (eta_low * (1.0 + math.exp(-gamma * p_low))
                - eta_rated * (1.0 + math.exp(-gamma * p_rated)))

    # mismatch() rises from 2*(eta_low - eta_rated) < 0, peaks, and decays to
    # eta_low - eta_rated < 0; bracket the descending root past the peak.
    grid = np.linspace(1e-6, 60.0 / p_low, 4000)
    vals = np.array([mismatch(g) for g in grid])
    k = int(np.argmax(vals))
    if vals[k] <= 0:
        raise GridfuseError("datasheet points admit no sigmoid fit")
    gamma = brentq(mismatch, grid[k], grid[-1], xtol=1e-14, rtol=1e-15)
    m = eta_rated * (1.0 + math.exp(-gamma * p_rated))
    return InverterCurve(m=m, gamma=gamma, kind=kind)


def photocurrent(i_ph_stc, irradiance, temp_cell_c=25.0, alpha_t=0.0005, scale=1.0):
    """Photocurrent from processed irradiance/temperature weather data.

    Standard irradiance and temperature scaling of the STC photocurrent:
    scale * I_STC * (S / 1000 W/m^2) * (1 + alpha_T * (T_cell - 25 C)).
    """
    if irradiance < 0:
        raise GridfuseError("negative irradiance")
    return scale * i_ph_stc * (irradiance / 1000.0) * (1.0 + alpha_t * (temp_cell_c - 25.0))


def pv_coupling_residuals(state: PvState, bus_v, bus_i, eta_inv: float, base_mva: float):
    """Power balance across a PV inverter at unity power factor.

    ``bus_v``/``bus_i`` are the per-unit POI voltage and the DER's AC
    injection current. DC megawatts convert to per-unit through base_mva.
    """
    v_r, v_i = bus_v
    i_r, i_i = bus_i
    r_p = eta_inv * state.i_pv * state.v_pv / base_mva - (v_r * i_r + v_i * i_i)
    r_q = v_i * i_r - v_r * i_i
    return r_p, r_q


def battery_coupling_residuals(
    state: BatteryState, bus_v, bus_i, eta_inv: float, eta_rec: float,
    discharging: bool, base_mva: float,
):
    """Power balance across a battery converter for a fixed dispatch window.

    Discharging applies the inversion efficiency to the DC side; charging
    applies the rectification efficiency to the AC side, so the battery
    stores eta_rec times what it draws from the grid.
    """
    v_r, v_i = bus_v
    i_r, i_i = bus_i
    p_ac = v_r * i_r + v_i * i_i
    if discharging:
        r_p = eta_inv * state.i_bt * state.v_bt / base_mva - p_ac
    else:
        r_p = state.i_bt * state.v_bt / base_mva - eta_rec * p_ac
    r_q = v_i * i_r - v_r * i_i
    return r_p, r_q


@dataclass(frozen=True)
class PvOperating:
    """Forward-simulation inputs for one PV: photocurrent and DC setpoint."""

    i_ph: float
    v_dc: float


@dataclass(frozen=True)
class BatteryOperating:
    """Forward-simulation inputs for one battery.

    ``i_schedule`` holds the dispatched current at each window endpoint
    (length = number of windows + 1); positive discharges.
    """

    v_soc0: float
    i_schedule: tuple[float, ...]


@dataclass(frozen=True)
class PvUnit:
    name: str
    system: PvSystem
    op: PvOperating
    inverter: InverterCurve
    poi_rtu: bool = True


@dataclass(frozen=True)
class BatteryUnit:
    name: str
    system: BatterySystem
    op: BatteryOperating
    inverter: InverterCurve
    rectifier: InverterCurve
    poi_rtu: bool = True


@dataclass(frozen=True)
class DerFleet:
    """All DERs of a scenario, with per-unit wiring to their POI buses."""

    pvs: tuple[PvUnit, ...] = ()
    batteries: tuple[BatteryUnit, ...] = ()

    def __post_init__(self):
        names = [u.name for u in self.pvs] + [u.name for u in self.batteries]
        if len(set(names)) != len(names):
            raise GridfuseError("duplicate DER names")

    @property
    def buses(self) -> set[int]:
        return {u.system.bus for u in self.pvs} | {u.system.bus for u in self.batteries}

    def pv(self, name: str) -> PvUnit:
        for u in self.pvs:
            if u.name == name:
                return u
        raise KeyError(name)

    def battery(self, name: str) -> BatteryUnit:
        for u in self.batteries:
            if u.name == name:
                return u
        raise KeyError(name)
