"""Equality-constrained WLS estimation via a full-space Newton-KKT solver.

Four routines are assembled from one constraint registry: stand-alone grid,
stand-alone PV, stand-alone battery, and the combined grid+DER problem
(optionally with unknown circuit parameters promoted to variables).

A problem compiles to an affine part A x + c plus sparse quadratic
monomials and diode-exponential terms, so residuals, Jacobians and the
exact Lagrangian Hessian are all assembled vectorized. The KKT system is
factorized sparse; a small regularization shift is added (and escalated up
to three times) if the factorization fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .der import (
    EXP_CLAMP,
    BatteryMeasurement,
    BatterySystem,
    DerFleet,
    PvMeasurement,
    PvSystem,
    inverter_efficiency,
)
from .exceptions import GridfuseError
from .network import GridCase, RtuMeasurement, build_admittance


@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 200
    reg_shift: float = 1e-10
    max_backtracks: int = 20
    refresh_eta: bool = True


@dataclass
class Estimates:
    """Solution of one estimation problem."""

    x: np.ndarray
    multipliers: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    message: str = ""
    meta: dict = field(default_factory=dict)

    def value(self, name: str) -> float:
        return float(self.x[self.meta["index"][name]])


class ProblemBuilder:
    """Incremental construction of the compiled problem."""

    def __init__(self):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        self.weights: list[float] = []
        self.init: list[float] = []
        self.rows: list[str] = []
        self.a_r: list[int] = []
        self.a_c: list[int] = []
        self.a_v: list[float] = []
        self.const: list[float] = []
        self.q_r: list[int] = []
        self.q_i: list[int] = []
        self.q_j: list[int] = []
        self.q_c: list[float] = []
        self.d_r: list[int] = []
        self.d_v: list[int] = []
        self.d_i0: list[float] = []
        self.d_a: list[float] = []
        self.meta: dict = {}

    def var(self, name: str, init: float = 0.0, weight: float = 0.0) -> int:
        if name in self.index:
            raise GridfuseError(f"duplicate variable {name}")
        k = len(self.names)
        self.names.append(name)
        self.index[name] = k
        self.weights.append(weight)
        self.init.append(init)
        return k

    def row(self, label: str, const: float = 0.0) -> int:
        r = len(self.rows)
        self.rows.append(label)
        self.const.append(const)
        return r

    def aff(self, row: int, col: int, coeff: float):
        self.a_r.append(row)
        self.a_c.append(col)
        self.a_v.append(coeff)

    def quad(self, row: int, i: int, j: int, coeff: float):
        self.q_r.append(row)
        self.q_i.append(i)
        self.q_j.append(j)
        self.q_c.append(coeff)

    def diode(self, row: int, var: int, i_0: float, a: float):
        self.d_r.append(row)
        self.d_v.append(var)
        self.d_i0.append(i_0)
        self.d_a.append(a)

    def bulk_aff(self, rows, cols, vals):
        self.a_r.extend(int(r) for r in rows)
        self.a_c.extend(int(c) for c in cols)
        self.a_v.extend(float(v) for v in vals)

    def finish(self) -> "EstimationProblem":
        n, m = len(self.names), len(self.rows)
        a = sp.csr_matrix(
            (np.array(self.a_v), (np.array(self.a_r, dtype=int), np.array(self.a_c, dtype=int))),
            shape=(m, n),
        )
        a.sum_duplicates()
        return EstimationProblem(
            names=self.names,
            index=self.index,
            weights=np.array(self.weights),
            x0=np.array(self.init),
            row_labels=self.rows,
            a=a,
            const=np.array(self.const),
            q_r=np.array(self.q_r, dtype=int),
            q_i=np.array(self.q_i, dtype=int),
            q_j=np.array(self.q_j, dtype=int),
            q_c=np.array(self.q_c),
            d_r=np.array(self.d_r, dtype=int),
            d_v=np.array(self.d_v, dtype=int),
            d_i0=np.array(self.d_i0),
            d_a=np.array(self.d_a),
            meta=self.meta,
        )


@dataclass
class EstimationProblem:
    """Compiled constraint registry and objective of one WLS problem."""

    names: list
    index: dict
    weights: np.ndarray
    x0: np.ndarray
    row_labels: list
    a: sp.csr_matrix
    const: np.ndarray
    q_r: np.ndarray
    q_i: np.ndarray
    q_j: np.ndarray
    q_c: np.ndarray
    d_r: np.ndarray
    d_v: np.ndarray
    d_i0: np.ndarray
    d_a: np.ndarray
    meta: dict

    def __post_init__(self):
        coo = self.a.tocoo()
        self._a_row, self._a_col, self._a_val = coo.row, coo.col, coo.data
        self._at = self.a.T.tocsr()
        # fixed diagonal metric for the line-search merit: damps the
        # gradient rows of heavily weighted noise variables so the
        # backtracking is not dominated by their multiplier scale
        self._merit_scale = np.concatenate(
            [1.0 / (1.0 + 2.0 * self.weights), np.ones(len(self.row_labels))]
        )

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self.row_labels)

    def _diode_terms(self, x: np.ndarray):
        u = x[self.d_v] / self.d_a
        capped = np.exp(np.minimum(u, EXP_CLAMP))
        peak = math.exp(EXP_CLAMP)
        value = self.d_i0 * np.where(
            u <= EXP_CLAMP, capped - 1.0, peak * (1.0 + (u - EXP_CLAMP)) - 1.0
        )
        slope = self.d_i0 / self.d_a * capped
        curv = np.where(u <= EXP_CLAMP, self.d_i0 / self.d_a**2 * capped, 0.0)
        return value, slope, curv

    def residual(self, x: np.ndarray) -> np.ndarray:
        r = self.a @ x + self.const
        if self.q_r.size:
            np.add.at(r, self.q_r, self.q_c * x[self.q_i] * x[self.q_j])
        if self.d_r.size:
            value, _, _ = self._diode_terms(x)
            np.add.at(r, self.d_r, value)
        return r

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        rows, cols, vals = [self._a_row], [self._a_col], [self._a_val]
        if self.q_r.size:
            rows += [self.q_r, self.q_r]
            cols += [self.q_i, self.q_j]
            vals += [self.q_c * x[self.q_j], self.q_c * x[self.q_i]]
        if self.d_r.size:
            _, slope, _ = self._diode_terms(x)
            rows.append(self.d_r)
            cols.append(self.d_v)
            vals.append(slope)
        j = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_rows, self.n_vars),
        )
        j.sum_duplicates()
        return j

    def constraint_hessian(self, x: np.ndarray, lam: np.ndarray) -> sp.csr_matrix:
        """sum_r lam_r * grad^2 h_r, exact (quadratic + diode terms only)."""
        rows, cols, vals = [], [], []
        if self.q_r.size:
            w = lam[self.q_r] * self.q_c
            rows += [self.q_i, self.q_j]
            cols += [self.q_j, self.q_i]
            vals += [w, w]
        if self.d_r.size:
            _, _, curv = self._diode_terms(x)
            rows.append(self.d_v)
            cols.append(self.d_v)
            vals.append(lam[self.d_r] * curv)
        if not rows:
            return sp.csr_matrix((self.n_vars, self.n_vars))
        h = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_vars, self.n_vars),
        )
        h.sum_duplicates()
        return h

    def objective(self, x: np.ndarray) -> float:
        return float(np.sum(self.weights * x * x))

    def kkt_residual(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        grad = 2.0 * self.weights * x + self.jacobian(x).T @ lam
        return np.concatenate([grad, self.residual(x)])


def solve(problem: EstimationProblem, init: np.ndarray | None = None,
          opts: SolveOptions | None = None) -> Estimates:
    """Damped Newton iteration on the first-order KKT conditions.

    Deterministic for identical inputs. Diode voltage steps are limited to
    2a per iteration (junction limiting); the step length then backtracks
    on the KKT residual norm. Non-convergence is reported in the returned
    Estimates, never silently accepted.
    """
    opts = opts or SolveOptions()
    n, m = problem.n_vars, problem.n_rows
    x = problem.x0.copy() if init is None else np.asarray(init, dtype=float).copy()
    if x.shape != (n,):
        raise GridfuseError(f"init has shape {x.shape}, expected ({n},)")
    lam = np.zeros(m)

    _check_identifiable(problem, x)

    f = problem.kkt_residual(x, lam)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    merit = float(f @ f)
    iters = 0
    message = ""
    while norm > opts.tol and iters < opts.max_iter:
        jac = problem.jacobian(x)
        hess = problem.constraint_hessian(x, lam) + sp.diags(2.0 * problem.weights)
        step = _kkt_step(hess, jac, f, n, m, opts)
        if step is None:
            return Estimates(
                x=x, multipliers=lam, objective=problem.objective(x),
                kkt_residual=norm, iterations=iters, converged=False,
                message="singular KKT matrix (constraint block rank-deficient)",
                meta=problem.meta | {"index": problem.index},
            )
        dx, dlam = step[:n], step[n:]

        # junction limiting, then backtracking on the squared KKT residual
        # (the Newton direction is a guaranteed descent direction for it)
        alpha = 1.0
        if problem.d_v.size:
            dv = np.abs(dx[problem.d_v])
            cap = 2.0 * problem.d_a
            big = dv > cap
            if np.any(big):
                alpha = min(alpha, float(np.min(cap[big] / dv[big])))
        for _ in range(opts.max_backtracks):
            f_new = problem.kkt_residual(x + alpha * dx, lam + alpha * dlam)
            merit_new = float(f_new @ f_new)
            if merit_new <= (1.0 - 1e-4 * alpha) * merit:
                break
            alpha *= 0.5
        x = x + alpha * dx
        lam = lam + alpha * dlam
        f = problem.kkt_residual(x, lam)
        norm = float(np.max(np.abs(f)))
        merit = float(f @ f)
        iters += 1

    converged = norm <= opts.tol
    if not converged:
        message = f"max iterations reached (KKT residual {norm:.3e})"
    return Estimates(
        x=x, multipliers=lam, objective=problem.objective(x),
        kkt_residual=norm, iterations=iters, converged=converged,
        message=message, meta=problem.meta | {"index": problem.index},
    )


def _kkt_step(hess, jac, f, n, m, opts):
    shift = 0.0
    for attempt in range(4):
        kkt = sp.bmat(
            [
                [hess + sp.eye(n) * shift, jac.T],
                [jac, -sp.eye(m) * shift if shift else None],
            ],
            format="csc",
        )
        try:
            lu = splu(kkt)
            step = lu.solve(-f)
            if np.all(np.isfinite(step)):
                return step
        except RuntimeError:
            pass
        shift = opts.reg_shift * (10.0 ** attempt)
    return None


def _check_identifiable(problem: EstimationProblem, x: np.ndarray):
    params = problem.meta.get("params", {})
    if not params:
        return
    jac = problem.jacobian(x).tocsc()
    for path, idx in params.items():
        col = jac[:, idx]
        if col.nnz == 0 or np.max(np.abs(col.data)) == 0.0:
            raise GridfuseError(
                f"unknown parameter {path} is structurally unidentifiable "
                "(zero column in the constraint Jacobian)"
            )


# --------------------------------------------------------------------------
# assembly helpers


def _unknown_conductance(builder, prefix, param, resistance, unknown_params):
    """Register 1/R as a variable if R is listed unknown; else return None."""
    path = f"{prefix}.{param}"
    if param in unknown_params or path in unknown_params:
        idx = builder.var(f"{path}.g", init=1.0 / resistance)
        builder.meta.setdefault("params", {})[path] = idx
        return idx
    return None


def _add_pv_circuit(builder, name, sys: PvSystem, meas: PvMeasurement,
                    unknown_params=()):
    """PV measurement-circuit rows r1-r4; returns the state variable ids."""
    w = meas.weight
    v_sh = builder.var(f"{name}.v_sh", init=meas.z_v + meas.z_i * sys.r_s)
    v_pv = builder.var(f"{name}.v_pv", init=meas.z_v)
    i_pv = builder.var(f"{name}.i_pv", init=meas.z_i)
    n_ph = builder.var(f"{name}.n_ph", weight=w)
    n_i = builder.var(f"{name}.n_i", weight=w)
    n_v = builder.var(f"{name}.n_v", weight=w)
    g_sh = _unknown_conductance(builder, name, "r_sh", sys.r_sh, unknown_params)
    g_s = _unknown_conductance(builder, name, "r_s", sys.r_s, unknown_params)

    r1 = builder.row(f"{name}.kcl_ph", const=-meas.z_ph)
    builder.aff(r1, n_ph, -1.0)
    builder.aff(r1, i_pv, 1.0)
    if g_sh is None:
        builder.aff(r1, v_sh, 1.0 / sys.r_sh)
    else:
        builder.quad(r1, v_sh, g_sh, 1.0)
    builder.diode(r1, v_sh, sys.i_0, sys.a)

    r2 = builder.row(f"{name}.meter_i", const=meas.z_i)
    builder.aff(r2, i_pv, -1.0)
    builder.aff(r2, n_i, 1.0)

    r3 = builder.row(f"{name}.series_r")
    builder.aff(r3, i_pv, 1.0)
    if g_s is None:
        builder.aff(r3, v_sh, -1.0 / sys.r_s)
        builder.aff(r3, v_pv, 1.0 / sys.r_s)
    else:
        builder.quad(r3, v_sh, g_s, -1.0)
        builder.quad(r3, v_pv, g_s, 1.0)

    r4 = builder.row(f"{name}.meter_v", const=meas.z_v)
    builder.aff(r4, v_pv, -1.0)
    builder.aff(r4, n_v, 1.0)

    return {"v_sh": v_sh, "v_pv": v_pv, "i_pv": i_pv,
            "n_ph": n_ph, "n_i": n_i, "n_v": n_v}


def _add_battery_circuit(builder, name, sys: BatterySystem, meas: BatteryMeasurement,
                         prev, unknown_params=()):
    """Battery terminal rows r1-r3 plus the chained SoC trapezoid row."""
    if prev is None:
        raise GridfuseError(
            f"battery {name}: missing prev_step (previous estimate or initial condition)"
        )
    v_oc_prev, v_bt_prev = prev
    w = meas.weight
    v_bt = builder.var(f"{name}.v_bt", init=meas.z_v)
    i_bt = builder.var(f"{name}.i_bt", init=meas.z_i)
    v_oc = builder.var(f"{name}.v_oc", init=meas.z_v + meas.z_i * sys.r_se)
    n_i = builder.var(f"{name}.n_i", weight=w)
    n_v = builder.var(f"{name}.n_v", weight=w)
    g_se = _unknown_conductance(builder, name, "r_se", sys.r_se, unknown_params)

    r1 = builder.row(f"{name}.meter_i", const=meas.z_i)
    builder.aff(r1, i_bt, -1.0)
    builder.aff(r1, n_i, 1.0)

    r2 = builder.row(f"{name}.series_r")
    builder.aff(r2, i_bt, 1.0)
    if g_se is None:
        builder.aff(r2, v_bt, 1.0 / sys.r_se)
        builder.aff(r2, v_oc, -1.0 / sys.r_se)
    else:
        builder.quad(r2, v_bt, g_se, 1.0)
        builder.quad(r2, v_oc, g_se, -1.0)

    r3 = builder.row(f"{name}.meter_v", const=meas.z_v)
    builder.aff(r3, v_bt, -1.0)
    builder.aff(r3, n_v, 1.0)

    half = sys.dt / (2.0 * sys.c_cap)
    r4 = builder.row(f"{name}.soc", const=-v_oc_prev / sys.ocv_b)
    builder.aff(r4, v_oc, 1.0 / sys.ocv_b)
    if g_se is None:
        builder.aff(r4, v_oc, half / sys.r_se)
        builder.aff(r4, v_bt, -half / sys.r_se)
        builder.const[r4] += half * (v_oc_prev - v_bt_prev) / sys.r_se
    else:
        builder.quad(r4, v_oc, g_se, half)
        builder.quad(r4, v_bt, g_se, -half)
        builder.aff(r4, g_se, half * (v_oc_prev - v_bt_prev))

    return {"v_bt": v_bt, "i_bt": i_bt, "v_oc": v_oc, "n_i": n_i, "n_v": n_v}


def _add_rtu_circuit_current(builder, rows, meas: RtuMeasurement, vr, vi, tag):
    """Substitute an RTU measurement circuit's current into a KCL row pair."""
    n_r = builder.var(f"{tag}.n_r", weight=meas.weight)
    n_i = builder.var(f"{tag}.n_i", weight=meas.weight)
    row_r, row_i = rows
    g_z, b_z = meas.g_z, meas.b_z
    builder.aff(row_r, vr, -g_z)
    builder.aff(row_r, vi, b_z)
    builder.aff(row_r, n_r, -1.0)
    builder.aff(row_i, vi, -g_z)
    builder.aff(row_i, vr, -b_z)
    builder.aff(row_i, n_i, -1.0)
    return n_r, n_i


def _slack_setpoint(case: GridCase) -> float:
    return case.gen_setpoints.get(case.slack_bus, (0.0, 1.0))[1]


def _pin_slack(builder, case, vr, vi, index):
    """Stamp the reference voltage source at the slack bus.

    The feature-transformed RTU circuits are homogeneous in voltage, so the
    WLS problem needs the reference source's magnitude as well as its angle
    to exclude the trivial all-zero solution.
    """
    k = index[case.slack_bus]
    vset = _slack_setpoint(case)
    row = builder.row("slack.v_real_pin", const=-vset)
    builder.aff(row, vr[k], 1.0)
    row = builder.row("slack.angle_pin")
    builder.aff(row, vi[k], 1.0)


def _eta_for_pv(unit, meas: PvMeasurement):
    return inverter_efficiency(max(meas.z_i * meas.z_v, 0.0), unit.inverter)


def _eta_for_battery(unit, meas: BatteryMeasurement, discharging, poi_meas, base_mva):
    if discharging:
        return inverter_efficiency(max(meas.z_i * meas.z_v, 0.0), unit.inverter)
    if poi_meas is not None:
        p_ac = abs(poi_meas.p_z) * base_mva
        return inverter_efficiency(p_ac, unit.rectifier)
    # no POI meter: resolve eta_rec(P_ac) by a short fixed point on |z_i z_v|
    p_dc = abs(meas.z_i * meas.z_v)
    p_ac = p_dc
    for _ in range(50):
        eta = inverter_efficiency(p_ac, unit.rectifier)
        p_new = p_dc / eta
        if abs(p_new - p_ac) < 1e-14 * max(1.0, p_ac):
            break
        p_ac = p_new
    return inverter_efficiency(p_ac, unit.rectifier)


def assemble_combined(case: GridCase, fleet: DerFleet, meas,
                      unknown_params=(), prev=None, eta=None) -> EstimationProblem:
    """Assemble the combined grid + PV + battery estimation problem.

    Constraint accounting (per window): one KCL row pair per RTU-metered,
    zero-injection, or DER-hosting bus; one slack angle pin; 4 rows per PV
    circuit; 3 + 1 (SoC) rows per battery circuit; 2 coupling rows per DER
    (real power balance, unity-pf reactive balance); plus 2 POI RTU rows
    per DER that carries a POI meter. Unknown parameters are promoted to
    variables inside the rows that reference them.

    ``meas`` is a MeasurementSet; ``prev`` maps battery names to their
    previous (V_OC, V_Bt) estimates or initial condition; ``eta`` overrides
    the efficiency constants (used by the outer refresh).
    """
    builder = ProblemBuilder()
    index = case.bus_index()
    n_bus = case.n_bus
    adm = build_admittance(case)

    vr0 = np.array([1.0] * n_bus)
    vi0 = np.zeros(n_bus)
    vr = [builder.var(f"bus{b.id}.vr", init=vr0[k]) for k, b in enumerate(case.buses)]
    vi = [builder.var(f"bus{b.id}.vi", init=vi0[k]) for k, b in enumerate(case.buses)]
    builder.meta["bus"] = {b.id: (vr[k], vi[k]) for k, b in enumerate(case.buses)}
    builder.meta["base_mva"] = case.base_mva

    der_buses = fleet.buses
    zi = (case.zero_injection_buses - der_buses)
    kcl_buses = sorted(
        (set(case.rtu_buses) | zi | der_buses) & {b.id for b in case.buses}
    )
    rows_of = {}
    for bid in kcl_buses:
        rows_of[bid] = (
            builder.row(f"bus{bid}.kcl_r"),
            builder.row(f"bus{bid}.kcl_i"),
        )

    # branch + shunt currents: stamp Y into every KCL row pair, vectorized
    ycoo = adm.ybus.tocoo()
    row_r = np.full(n_bus, -1, dtype=int)
    row_i = np.full(n_bus, -1, dtype=int)
    for bid, (rr, ri) in rows_of.items():
        row_r[index[bid]] = rr
        row_i[index[bid]] = ri
    live = row_r[ycoo.row] >= 0
    yr, yc, yd = ycoo.row[live], ycoo.col[live], ycoo.data[live]
    builder.bulk_aff(row_r[yr], np.array(vr)[yc], yd.real)
    builder.bulk_aff(row_r[yr], np.array(vi)[yc], -yd.imag)
    builder.bulk_aff(row_i[yr], np.array(vi)[yc], yd.real)
    builder.bulk_aff(row_i[yr], np.array(vr)[yc], yd.imag)

    # RTU measurement circuits substitute for the conventional injections
    for bid in sorted(case.rtu_buses):
        if bid not in meas.rtu:
            raise GridfuseError(f"missing RTU measurement for bus {bid}")
        k = index[bid]
        _add_rtu_circuit_current(
            builder, rows_of[bid], meas.rtu[bid], vr[k], vi[k], f"rtu{bid}"
        )

    _pin_slack(builder, case, vr, vi, index)

    eta = eta or {}
    builder.meta["eta"] = {}
    builder.meta["pv"] = {}
    builder.meta["battery"] = {}

    for unit in fleet.pvs:
        name = unit.name
        if name not in meas.pv:
            raise GridfuseError(f"missing PV measurement for {name}")
        pvm = meas.pv[name]
        ids = _add_pv_circuit(builder, name, unit.system, pvm, unknown_params)
        k = index[unit.system.bus]
        eta_inv = eta.get(name, _eta_for_pv(unit, pvm))
        builder.meta["eta"][name] = eta_inv
        p0 = eta_inv * pvm.z_i * pvm.z_v / case.base_mva
        iac_r = builder.var(f"{name}.iac_r", init=p0)
        iac_i = builder.var(f"{name}.iac_i", init=0.0)
        ids.update({"iac_r": iac_r, "iac_i": iac_i})
        rr, ri = rows_of[unit.system.bus]
        builder.aff(rr, iac_r, -1.0)
        builder.aff(ri, iac_i, -1.0)
        rp = builder.row(f"{name}.couple_p")
        builder.quad(rp, ids["i_pv"], ids["v_pv"], eta_inv / case.base_mva)
        builder.quad(rp, vr[k], iac_r, -1.0)
        builder.quad(rp, vi[k], iac_i, -1.0)
        rq = builder.row(f"{name}.couple_q")
        builder.quad(rq, vi[k], iac_r, 1.0)
        builder.quad(rq, vr[k], iac_i, -1.0)
        if unit.poi_rtu:
            if name not in meas.poi:
                raise GridfuseError(f"missing POI RTU measurement for {name}")
            pm = meas.poi[name]
            pr = builder.row(f"{name}.poi_r")
            pi = builder.row(f"{name}.poi_i")
            n_r = builder.var(f"{name}.poi_n_r", weight=pm.weight)
            n_i = builder.var(f"{name}.poi_n_i", weight=pm.weight)
            builder.aff(pr, vr[k], pm.g_z)
            builder.aff(pr, vi[k], -pm.b_z)
            builder.aff(pr, n_r, 1.0)
            builder.aff(pr, iac_r, -1.0)
            builder.aff(pi, vi[k], pm.g_z)
            builder.aff(pi, vr[k], pm.b_z)
            builder.aff(pi, n_i, 1.0)
            builder.aff(pi, iac_i, -1.0)
            ids.update({"poi_n_r": n_r, "poi_n_i": n_i})
        builder.meta["pv"][name] = ids

    prev = prev or {}
    for unit in fleet.batteries:
        name = unit.name
        if name not in meas.battery:
            raise GridfuseError(f"missing battery measurement for {name}")
        btm = meas.battery[name]
        discharging = meas.dispatch.get(name, "discharging") == "discharging"
        ids = _add_battery_circuit(
            builder, name, unit.system, btm, prev.get(name), unknown_params
        )
        k = index[unit.system.bus]
        eta_val = eta.get(
            name,
            _eta_for_battery(unit, btm, discharging, meas.poi.get(name), case.base_mva),
        )
        builder.meta["eta"][name] = eta_val
        if discharging:
            p0 = eta_val * btm.z_i * btm.z_v / case.base_mva
        else:
            p0 = btm.z_i * btm.z_v / (eta_val * case.base_mva)
        iac_r = builder.var(f"{name}.iac_r", init=p0)
        iac_i = builder.var(f"{name}.iac_i", init=0.0)
        ids.update({"iac_r": iac_r, "iac_i": iac_i})
        rr, ri = rows_of[unit.system.bus]
        builder.aff(rr, iac_r, -1.0)
        builder.aff(ri, iac_i, -1.0)
        rp = builder.row(f"{name}.couple_p")
        if discharging:
            builder.quad(rp, ids["i_bt"], ids["v_bt"], eta_val / case.base_mva)
            builder.quad(rp, vr[k], iac_r, -1.0)
            builder.quad(rp, vi[k], iac_i, -1.0)
        else:
            builder.quad(rp, ids["i_bt"], ids["v_bt"], 1.0 / case.base_mva)
            builder.quad(rp, vr[k], iac_r, -eta_val)
            builder.quad(rp, vi[k], iac_i, -eta_val)
        rq = builder.row(f"{name}.couple_q")
        builder.quad(rq, vi[k], iac_r, 1.0)
        builder.quad(rq, vr[k], iac_i, -1.0)
        if unit.poi_rtu:
            if name not in meas.poi:
                raise GridfuseError(f"missing POI RTU measurement for {name}")
            pm = meas.poi[name]
            pr = builder.row(f"{name}.poi_r")
            pi = builder.row(f"{name}.poi_i")
            n_r = builder.var(f"{name}.poi_n_r", weight=pm.weight)
            n_i = builder.var(f"{name}.poi_n_i", weight=pm.weight)
            builder.aff(pr, vr[k], pm.g_z)
            builder.aff(pr, vi[k], -pm.b_z)
            builder.aff(pr, n_r, 1.0)
            builder.aff(pr, iac_r, -1.0)
            builder.aff(pi, vi[k], pm.g_z)
            builder.aff(pi, vr[k], pm.b_z)
            builder.aff(pi, n_i, 1.0)
            builder.aff(pi, iac_i, -1.0)
            ids.update({"poi_n_r": n_r, "poi_n_i": n_i})
        builder.meta["battery"][name] = ids

    return builder.finish()


def assemble_grid(case: GridCase, rtu_meas) -> EstimationProblem:
    """Assemble the stand-alone grid problem (RTU circuits + KCL only).

    ``rtu_meas`` maps bus id to one RtuMeasurement or a list of them (a bus
    can host several metered injection circuits, e.g. a load RTU plus a
    DER's POI meter).
    """
    builder = ProblemBuilder()
    index = case.bus_index()
    adm = build_admittance(case)
    n_bus = case.n_bus
    vr = [builder.var(f"bus{b.id}.vr", init=1.0) for b in case.buses]
    vi = [builder.var(f"bus{b.id}.vi", init=0.0) for b in case.buses]
    builder.meta["bus"] = {b.id: (vr[k], vi[k]) for k, b in enumerate(case.buses)}
    builder.meta["base_mva"] = case.base_mva

    metered = {b: m if isinstance(m, list) else [m] for b, m in rtu_meas.items()}
    kcl_buses = sorted(set(metered) | set(case.zero_injection_buses))
    rows_of = {
        bid: (builder.row(f"bus{bid}.kcl_r"), builder.row(f"bus{bid}.kcl_i"))
        for bid in kcl_buses
    }
    ycoo = adm.ybus.tocoo()
    row_r = np.full(n_bus, -1, dtype=int)
    row_i = np.full(n_bus, -1, dtype=int)
    for bid, (rr, ri) in rows_of.items():
        row_r[index[bid]] = rr
        row_i[index[bid]] = ri
    live = row_r[ycoo.row] >= 0
    yr, yc, yd = ycoo.row[live], ycoo.col[live], ycoo.data[live]
    builder.bulk_aff(row_r[yr], np.array(vr)[yc], yd.real)
    builder.bulk_aff(row_r[yr], np.array(vi)[yc], -yd.imag)
    builder.bulk_aff(row_i[yr], np.array(vi)[yc], yd.real)
    builder.bulk_aff(row_i[yr], np.array(vr)[yc], yd.imag)
    for bid in sorted(metered):
        k = index[bid]
        for t, m in enumerate(metered[bid]):
            _add_rtu_circuit_current(
                builder, rows_of[bid], m, vr[k], vi[k], f"rtu{bid}.{t}"
            )
    _pin_slack(builder, case, vr, vi, index)
    return builder.finish()


def estimate_standalone_grid(case: GridCase, rtu_meas, opts=None) -> Estimates:
    """CktSE: grid states from RTU measurements under grid constraints."""
    return solve(assemble_grid(case, rtu_meas), opts=opts)


def estimate_standalone_pv(sys: PvSystem, meas: PvMeasurement,
                           unknown_params=(), opts=None, name="pv") -> Estimates:
    """PV-SE: one stand-alone PV circuit from its own meters."""
    builder = ProblemBuilder()
    builder.meta["pv"] = {name: _add_pv_circuit(builder, name, sys, meas, unknown_params)}
    return solve(builder.finish(), opts=opts)


def estimate_standalone_battery(sys: BatterySystem, meas: BatteryMeasurement,
                                prev_step, unknown_params=(), opts=None,
                                name="battery") -> Estimates:
    """Bt-SE: one stand-alone battery window chained on the previous step."""
    builder = ProblemBuilder()
    builder.meta["battery"] = {
        name: _add_battery_circuit(builder, name, sys, meas, prev_step, unknown_params)
    }
    return solve(builder.finish(), opts=opts)


def solve_combined(case, fleet, meas, unknown_params=(), prev=None,
                   opts=None) -> Estimates:
    """CktSE-renew / Re-CktPSE: assemble, solve, and refresh the efficiency.

    The sigmoid efficiency is held constant inside each Newton solve
    (evaluated from measured power at assembly); after first convergence it
    is re-evaluated once at the estimated powers and the solve repeats from
    the warm start if anything moved.
    """
    opts = opts or SolveOptions()
    problem = assemble_combined(case, fleet, meas, unknown_params, prev)
    est = solve(problem, opts=opts)
    if not (opts.refresh_eta and est.converged):
        return est
    eta_new = _refreshed_eta(case, fleet, meas, problem, est)
    drift = max(
        (abs(eta_new[k] - problem.meta["eta"][k]) for k in eta_new), default=0.0
    )
    if drift <= 1e-12:
        return est
    refreshed = assemble_combined(case, fleet, meas, unknown_params, prev, eta=eta_new)
    return solve(refreshed, init=est.x, opts=opts)


def _refreshed_eta(case, fleet, meas, problem, est):
    out = {}
    for unit in fleet.pvs:
        ids = problem.meta["pv"][unit.name]
        p_dc = est.x[ids["i_pv"]] * est.x[ids["v_pv"]]
        out[unit.name] = inverter_efficiency(max(p_dc, 0.0), unit.inverter)
    for unit in fleet.batteries:
        ids = problem.meta["battery"][unit.name]
        discharging = meas.dispatch.get(unit.name, "discharging") == "discharging"
        if discharging:
            p_dc = est.x[ids["i_bt"]] * est.x[ids["v_bt"]]
            out[unit.name] = inverter_efficiency(max(p_dc, 0.0), unit.inverter)
        else:
            k_r, k_i = problem.meta["bus"][unit.system.bus]
            p_ac = abs(
                est.x[k_r] * est.x[ids["iac_r"]] + est.x[k_i] * est.x[ids["iac_i"]]
            ) * case.base_mva
            out[unit.name] = inverter_efficiency(p_ac, unit.rectifier)
    return out
