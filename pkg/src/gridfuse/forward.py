"""Ground-truth generation and measurement synthesis.

Solves the combined AC+DC circuit at each dispatch window (sparse polar
Newton-Raphson power flow for the grid, closed DC solves for the devices,
and a fixed point on the converter efficiencies), advances battery SoC by
trapezoidal integration, and synthesizes noisy / biased /
parameter-perturbed measurement sets from deterministic seeded streams.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from .der import (
    BatteryMeasurement,
    BatteryState,
    BatteryUnit,
    DerFleet,
    PvMeasurement,
    PvState,
    PvUnit,
    battery_coupling_residuals,
    battery_residuals,
    diode_current,
    inverter_efficiency,
    ocv_from_soc,
    pv_coupling_residuals,
    pv_residuals,
    soc_update_residual,
)
from .exceptions import ConvergenceError, GridfuseError
from .network import GridCase, RtuMeasurement, build_admittance
from .rng import NoiseStream


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise levels: per-unit for RTUs, device units for DERs."""

    rtu_sigma: float = 0.001
    der_sigma: float = 0.1

    def __post_init__(self):
        if self.rtu_sigma < 0 or self.der_sigma < 0:
            raise GridfuseError("noise sigmas must be nonnegative")


@dataclass
class MeasurementSet:
    """Every measurement of one estimation window.

    ``rtu`` maps bus id to the conventional-injection RTU triple; ``poi``
    maps DER name to the RTU metering that DER's AC injection; ``pv`` and
    ``battery`` carry the DC-side meters; ``dispatch`` the scheduled
    charge/discharge flag per battery for this window.
    """

    window: int
    rtu: dict = field(default_factory=dict)
    poi: dict = field(default_factory=dict)
    pv: dict = field(default_factory=dict)
    battery: dict = field(default_factory=dict)
    dispatch: dict = field(default_factory=dict)


@dataclass
class TruthStep:
    """Solved operating point of one dispatch window."""

    voltages: np.ndarray
    conv_injection: dict
    der_power: dict
    der_current: dict
    pv_states: dict
    battery_states: dict
    eta: dict


@dataclass
class GroundTruth:
    """Forward-simulation record: one TruthStep per window node 0..T."""

    case: GridCase
    fleet: DerFleet
    steps: list
    soc: dict

    @property
    def windows(self) -> int:
        return len(self.steps) - 1


def newton_powerflow(case: GridCase, extra_p=None, tol=1e-12, max_iter=60):
    """Sparse polar Newton-Raphson AC power flow.

    PV buses hold P and |V| (per gen setpoints), PQ buses hold P and Q, the
    slack holds its voltage. ``extra_p`` adds per-unit injections (the DER
    AC power) on top of the scheduled gen-minus-load injections. Returns
    (complex voltages, net complex injection per bus).
    """
    adm = build_admittance(case)
    ybus = adm.ybus
    index = case.bus_index()
    n = case.n_bus
    extra = np.zeros(n)
    for bid, p in (extra_p or {}).items():
        extra[index[bid]] += p

    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for b in case.buses:
        inj = b.injection or (0.0, 0.0)
        k = index[b.id]
        p_spec[k], q_spec[k] = inj
    p_spec += extra

    types = np.array([case.bus_types.get(b.id, 1) for b in case.buses])
    slack = index[case.slack_bus]
    vm = np.ones(n)
    va = np.zeros(n)
    for bid, (_, vset) in case.gen_setpoints.items():
        if case.bus_types.get(bid) in (2, 3):
            vm[index[bid]] = vset
    pv = np.flatnonzero((types == 2) & (np.arange(n) != slack))
    pq = np.flatnonzero(types == 1)
    pvpq = np.concatenate([pv, pq])

    for it in range(max_iter):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(ybus @ v)
        mis = np.concatenate(
            [(s_calc.real - p_spec)[pvpq], (s_calc.imag - q_spec)[pq]]
        )
        norm = np.max(np.abs(mis)) if mis.size else 0.0
        if norm < tol:
            break
        ibus = ybus @ v
        diag_v = sp.diags(v)
        diag_i = sp.diags(ibus)
        diag_vn = sp.diags(v / np.abs(v))
        ds_dva = (1j * diag_v @ (diag_i - ybus @ diag_v).conjugate()).tocsr()
        ds_dvm = (diag_v @ (ybus @ diag_vn).conjugate()
                  + diag_i.conjugate() @ diag_vn).tocsr()
        j11 = ds_dva[pvpq, :][:, pvpq].real
        j12 = ds_dvm[pvpq, :][:, pq].real
        j21 = ds_dva[pq, :][:, pvpq].imag
        j22 = ds_dvm[pq, :][:, pq].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        try:
            dx = spsolve(jac, -mis)
        except RuntimeError as e:
            raise ConvergenceError(f"singular power-flow Jacobian: {e}") from None
        if not np.all(np.isfinite(dx)):
            raise ConvergenceError("singular power-flow Jacobian")
        va[pvpq] += dx[: pvpq.size]
        vm[pq] += dx[pvpq.size:]
    else:
        raise ConvergenceError(
            f"power flow did not converge in {max_iter} iterations",
            residual_norm=float(norm), iterations=max_iter,
        )
    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(ybus @ v)
    return v, s_inj


def solve_pv_dc(unit: PvUnit) -> PvState:
    """Solve the single-diode circuit at the scenario's DC voltage setpoint.

    Scalar root in V_SH of the photocurrent KCL with V_PV fixed; the
    bracket grows until the monotone mismatch changes sign.
    """
    sys, op = unit.system, unit.op

    def mismatch(v_sh):
        return (op.i_ph - diode_current(v_sh, sys.i_0, sys.a)
                - v_sh / sys.r_sh - (v_sh - op.v_dc) / sys.r_s)

    lo = 0.0
    if mismatch(lo) <= 0:
        lo = -abs(op.v_dc) - 1.0
        if mismatch(lo) <= 0:
            raise GridfuseError(f"PV {unit.name}: no operating point at this setpoint")
    hi = max(op.v_dc, sys.a * 40.0, 1e-3)
    for _ in range(80):
        if mismatch(hi) < 0:
            break
        hi *= 1.5
    else:
        raise GridfuseError(f"PV {unit.name}: diode never turns on in bracket")
    v_sh = brentq(mismatch, lo, hi, xtol=1e-15, rtol=8.9e-16)
    i_pv = (v_sh - op.v_dc) / sys.r_s
    return PvState(
        v_sh=v_sh,
        v_pv=op.v_dc,
        i_pv=i_pv,
        i_d=diode_current(v_sh, sys.i_0, sys.a),
        i_ph=op.i_ph,
        p_pv=i_pv * op.v_dc,
    )


def step_soc(battery, i_bt_profile, n_steps: int, dt: float,
             v_soc0: float = 0.5) -> np.ndarray:
    """Trapezoidal SoC trajectory including self-discharge.

    ``i_bt_profile`` holds the battery current at each window endpoint
    (length n_steps + 1, positive discharging). Raises if the trajectory
    leaves [0, 1].
    """
    prof = np.asarray(i_bt_profile, dtype=float)
    if prof.size < n_steps + 1:
        raise GridfuseError("current profile shorter than n_steps + 1")
    if not 0.0 <= v_soc0 <= 1.0:
        raise GridfuseError("initial SoC outside [0, 1]")
    c, r_sd = battery.c_cap, battery.r_sd
    leak = 0.0 if math.isinf(r_sd) else 1.0 / (2.0 * r_sd)
    out = np.empty(n_steps + 1)
    out[0] = v_soc0
    for k in range(1, n_steps + 1):
        lhs = c / dt + leak
        rhs = out[k - 1] * (c / dt - leak) - 0.5 * (prof[k] + prof[k - 1])
        out[k] = rhs / lhs
        if not 0.0 <= out[k] <= 1.0:
            raise GridfuseError("battery over/under charge in schedule")
    return out


def _battery_state(unit: BatteryUnit, v_soc: float, i_bt: float) -> BatteryState:
    sys = unit.system
    v_oc = sys.ocv_a + sys.ocv_b * v_soc
    v_bt = v_oc - i_bt * sys.r_se
    return BatteryState(v_soc=v_soc, v_oc=v_oc, v_bt=v_bt, i_bt=i_bt, p_bt=i_bt * v_bt)


def _battery_ac_power(unit: BatteryUnit, state: BatteryState, discharging: bool):
    """AC-side megawatts and the efficiency constant for one window."""
    if discharging:
        eta = inverter_efficiency(max(state.p_bt, 0.0), unit.inverter)
        return eta * state.p_bt, eta
    # charging: P_dc = eta_rec(|P_ac|) * P_ac, P_ac < 0; solve the scalar root
    p_dc = state.p_bt

    def g(p_ac):
        return inverter_efficiency(abs(p_ac), unit.rectifier) * p_ac - p_dc

    lo, hi = p_dc * 4.0, 0.0
    p_ac = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16)
    return p_ac, inverter_efficiency(abs(p_ac), unit.rectifier)


def solve_combined_powerflow(case: GridCase, fleet: DerFleet,
                             windows: int = 1) -> GroundTruth:
    """Solve the combined AC+DC circuit along the dispatch schedule.

    One TruthStep per window node 0..windows; the assembled combined
    residual (grid KCL + device equations + coupling, zero noise) is
    checked to below 1e-10 infinity-norm before returning.
    """
    soc = {}
    for unit in fleet.batteries:
        soc[unit.name] = step_soc(
            unit.system, unit.op.i_schedule, windows, unit.system.dt,
            v_soc0=unit.op.v_soc0,
        )

    pv_cache = {u.name: solve_pv_dc(u) for u in fleet.pvs}
    steps = []
    for k in range(windows + 1):
        pv_states, battery_states, der_p, eta = {}, {}, {}, {}
        for unit in fleet.pvs:
            st = pv_cache[unit.name]
            pv_states[unit.name] = st
            e = inverter_efficiency(max(st.p_pv, 0.0), unit.inverter)
            eta[unit.name] = e
            der_p[unit.name] = (e * st.p_pv / case.base_mva, unit.system.bus)
        for unit in fleet.batteries:
            dispatch = unit.system.dispatch[max(k - 1, 0)] if unit.system.dispatch else "discharging"
            st = _battery_state(unit, soc[unit.name][k], unit.op.i_schedule[k])
            battery_states[unit.name] = st
            p_ac, e = _battery_ac_power(unit, st, dispatch == "discharging")
            eta[unit.name] = e
            der_p[unit.name] = (p_ac / case.base_mva, unit.system.bus)

        if k > 0 and not fleet.batteries and steps:
            steps.append(steps[0])               # static network: reuse window 0
            continue
        extra = {}
        for _, (p_pu, bus) in der_p.items():
            extra[bus] = extra.get(bus, 0.0) + p_pu
        v, s_inj = newton_powerflow(case, extra_p=extra)
        index = case.bus_index()
        conv, der_i = {}, {}
        for b in case.buses:
            kk = index[b.id]
            p_der_here = sum(p for p, bus in der_p.values() if bus == b.id)
            conv[b.id] = (float(s_inj[kk].real) - p_der_here, float(s_inj[kk].imag))
        for name, (p_pu, bus) in der_p.items():
            vb = v[index[bus]]
            i_inj = p_pu * vb / abs(vb) ** 2
            der_i[name] = (float(i_inj.real), float(i_inj.imag))
        steps.append(
            TruthStep(
                voltages=v,
                conv_injection=conv,
                der_power={n: p for n, (p, _) in der_p.items()},
                der_current=der_i,
                pv_states=pv_states,
                battery_states=battery_states,
                eta=eta,
            )
        )

    truth = GroundTruth(case=case, fleet=fleet, steps=steps, soc=soc)
    norm = combined_residual_norm(truth)
    if norm > 1e-10:
        raise ConvergenceError(
            f"combined forward solution violates the circuit equations "
            f"(residual {norm:.3e})", residual_norm=norm,
        )
    return truth


def combined_residual_norm(truth: GroundTruth) -> float:
    """Infinity norm of the full combined equation set at the truth.

    Covers grid KCL at every bus, the PV and battery device residuals with
    exact measurements and zero noise, the coupling rows, and the SoC
    trapezoid (with self-discharge, matching the forward integrator).
    """
    case, fleet = truth.case, truth.fleet
    adm = build_admittance(case)
    index = case.bus_index()
    bus_of = {u.name: u.system.bus for u in list(fleet.pvs) + list(fleet.batteries)}
    worst = 0.0
    for k, step in enumerate(truth.steps):
        v = step.voltages
        i_out = adm.ybus @ v
        inj = np.zeros(case.n_bus, dtype=complex)
        for bid, (p, q) in step.conv_injection.items():
            kk = index[bid]
            inj[kk] += complex(p, -q) / v[kk].conjugate()
        for name, (ir, ii) in step.der_current.items():
            inj[index[bus_of[name]]] += complex(ir, ii)
        worst = max(worst, float(np.max(np.abs(i_out - inj))))

        for unit in fleet.pvs:
            st = step.pv_states[unit.name]
            meas = PvMeasurement(z_v=st.v_pv, z_i=st.i_pv, z_ph=st.i_ph, sigma=0.0)
            r = pv_residuals(st, unit.system, meas, (0.0, 0.0, 0.0))
            worst = max(worst, float(np.max(np.abs(r))))
            vb = v[index[unit.system.bus]]
            rp, rq = pv_coupling_residuals(
                st, (vb.real, vb.imag), step.der_current[unit.name],
                step.eta[unit.name], case.base_mva,
            )
            worst = max(worst, abs(rp), abs(rq))
        for unit in fleet.batteries:
            st = step.battery_states[unit.name]
            meas = BatteryMeasurement(z_v=st.v_bt, z_i=st.i_bt, sigma=0.0)
            r = battery_residuals(st, unit.system, meas, (0.0, 0.0))
            worst = max(worst, float(np.max(np.abs(r))))
            dispatch = unit.system.dispatch[max(k - 1, 0)] if unit.system.dispatch else "discharging"
            vb = v[index[unit.system.bus]]
            rp, rq = battery_coupling_residuals(
                st, (vb.real, vb.imag), step.der_current[unit.name],
                step.eta[unit.name], step.eta[unit.name],
                dispatch == "discharging", case.base_mva,
            )
            worst = max(worst, abs(rp), abs(rq))
            if k > 0 and math.isinf(unit.system.r_sd):
                prev = truth.steps[k - 1].battery_states[unit.name]
                r_soc = soc_update_residual(
                    st.v_oc, prev.v_oc, st.v_bt, prev.v_bt, unit.system
                )
                worst = max(worst, abs(r_soc))
    return worst


# --------------------------------------------------------------------------
# measurement synthesis


def synthesize_measurements(truth: GroundTruth, noise: NoiseModel,
                            instance_seed: int) -> list[MeasurementSet]:
    """Draw one noisy MeasurementSet per estimation window (1..T).

    A pure function of (truth, noise model, seed): streams are keyed by the
    instance seed and consumed in a fixed component order, so the same seed
    reproduces the same bytes regardless of scheduling.
    """
    stream = NoiseStream(instance_seed)
    case, fleet = truth.case, truth.fleet
    index = case.bus_index()
    out = []
    for k in range(1, truth.windows + 1):
        step = truth.steps[k]
        ms = MeasurementSet(window=k)
        for bid in sorted(case.rtu_buses):
            p, q = step.conv_injection[bid]
            vmag = abs(step.voltages[index[bid]])
            ms.rtu[bid] = RtuMeasurement(
                bus=bid,
                p_z=p + stream.gauss(noise.rtu_sigma),
                q_z=-q + stream.gauss(noise.rtu_sigma),
                v_z=vmag + stream.gauss(noise.rtu_sigma),
                sigma=noise.rtu_sigma,
            )
        for unit in fleet.pvs:
            st = step.pv_states[unit.name]
            if unit.poi_rtu:
                ms.poi[unit.name] = _poi_measurement(
                    unit, step, index, stream, noise
                )
            ms.pv[unit.name] = PvMeasurement(
                z_v=st.v_pv + stream.gauss(noise.der_sigma),
                z_i=st.i_pv + stream.gauss(noise.der_sigma),
                z_ph=st.i_ph + stream.gauss(noise.der_sigma),
                sigma=noise.der_sigma,
            )
        for unit in fleet.batteries:
            st = step.battery_states[unit.name]
            if unit.poi_rtu:
                ms.poi[unit.name] = _poi_measurement(
                    unit, step, index, stream, noise
                )
            ms.battery[unit.name] = BatteryMeasurement(
                z_v=st.v_bt + stream.gauss(noise.der_sigma),
                z_i=st.i_bt + stream.gauss(noise.der_sigma),
                sigma=noise.der_sigma,
            )
            ms.dispatch[unit.name] = (
                unit.system.dispatch[k - 1] if unit.system.dispatch else "discharging"
            )
        out.append(ms)
    return out


def _poi_measurement(unit, step, index, stream, noise):
    bus = unit.system.bus
    vmag = abs(step.voltages[index[bus]])
    p_true = step.der_power[unit.name]
    return RtuMeasurement(
        bus=bus,
        p_z=p_true + stream.gauss(noise.rtu_sigma),
        q_z=0.0 + stream.gauss(noise.rtu_sigma),
        v_z=vmag + stream.gauss(noise.rtu_sigma),
        sigma=noise.rtu_sigma,
    )


def inject_bad_data(measurements: list[MeasurementSet], specs) -> list[MeasurementSet]:
    """Scale targeted channels by (1 + bias) after noise, flagging provenance.

    ``specs`` is a list of BadDataSpec-like objects with component, channel
    and bias. DER channels are z_v / z_i / z_ph; an RTU is targeted as
    component ``rtu:<bus>`` with channel p_z / q_z / v_z.
    """
    out = []
    for ms in measurements:
        new = MeasurementSet(
            window=ms.window, rtu=dict(ms.rtu), poi=dict(ms.poi),
            pv=dict(ms.pv), battery=dict(ms.battery), dispatch=dict(ms.dispatch),
        )
        for spec in specs:
            comp, chan, bias = spec.component, spec.channel, spec.bias
            flag = bias != 0.0
            if comp.startswith("rtu:"):
                bid = int(comp.split(":", 1)[1])
                if bid not in new.rtu:
                    raise GridfuseError(f"bad-data target rtu:{bid} not measured")
                if chan not in ("p_z", "q_z", "v_z"):
                    raise GridfuseError(f"unknown RTU channel {chan!r}")
                m = new.rtu[bid]
                new.rtu[bid] = dataclasses.replace(
                    m, **{chan: getattr(m, chan) * (1.0 + bias)}, biased=flag
                )
            elif comp in new.pv:
                if chan not in ("z_v", "z_i", "z_ph"):
                    raise GridfuseError(f"unknown PV channel {chan!r}")
                m = new.pv[comp]
                new.pv[comp] = dataclasses.replace(
                    m, **{chan: getattr(m, chan) * (1.0 + bias),
                          f"biased{chan[1:]}": flag}
                )
            elif comp in new.battery:
                if chan not in ("z_v", "z_i"):
                    raise GridfuseError(f"unknown battery channel {chan!r}")
                m = new.battery[comp]
                new.battery[comp] = dataclasses.replace(
                    m, **{chan: getattr(m, chan) * (1.0 + bias),
                          f"biased{chan[1:]}": flag}
                )
            else:
                raise GridfuseError(f"unknown bad-data target {comp!r}")
        out.append(new)
    return out


def perturb_parameters(fleet: DerFleet, param_paths, rel_error: float):
    """Scale the listed DER parameters by (1 + rel_error) for the estimator.

    The truth simulation keeps the correct fleet; this returns the fleet
    the estimator is told about, plus the true values keyed by path for
    scoring.
    """
    true_values = {}
    pvs, batteries = list(fleet.pvs), list(fleet.batteries)
    for path in param_paths:
        comp, _, param = str(path).partition(".")
        hit = False
        for i, unit in enumerate(pvs):
            if unit.name == comp:
                if param not in ("r_s", "r_sh"):
                    raise GridfuseError(f"unknown PV parameter {param!r}")
                old = getattr(unit.system, param)
                true_values[path] = old
                pvs[i] = dataclasses.replace(
                    unit, system=dataclasses.replace(
                        unit.system, **{param: old * (1.0 + rel_error)}
                    )
                )
                hit = True
        for i, unit in enumerate(batteries):
            if unit.name == comp:
                if param != "r_se":
                    raise GridfuseError(f"unknown battery parameter {param!r}")
                old = getattr(unit.system, param)
                true_values[path] = old
                batteries[i] = dataclasses.replace(
                    unit, system=dataclasses.replace(
                        unit.system, **{param: old * (1.0 + rel_error)}
                    )
                )
                hit = True
        if not hit:
            raise GridfuseError(f"unknown parameter path {path!r}")
    return DerFleet(pvs=tuple(pvs), batteries=tuple(batteries)), true_values
