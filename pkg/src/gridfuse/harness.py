"""Monte-Carlo experiment runner for the scenario studies.

Each instance draws its own seeded measurement set, runs the requested
stand-alone (S1) and combined (S2) estimation setups across all dispatch
windows, and scores every state family against the forward-simulation
truth. Instances run in parallel when asked, but results aggregate in
instance order, so serial and parallel runs produce identical reports.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .caseio import ScenarioConfig
from .estimator import (
    SolveOptions,
    estimate_standalone_battery,
    estimate_standalone_grid,
    estimate_standalone_pv,
    solve_combined,
)
from .exceptions import GridfuseError
from .forward import (
    GroundTruth,
    NoiseModel,
    inject_bad_data,
    perturb_parameters,
    solve_combined_powerflow,
    synthesize_measurements,
)
from .metrics import nrmse, variance_avg


@dataclass(frozen=True)
class EstimateRow:
    """One scored estimate: a (family, component) value at one window."""

    instance: int
    setup: str
    family: str
    component: str
    step: int
    estimate: float
    truth: float


@dataclass
class RunReport:
    """All per-instance estimates of a scenario run plus derived metrics."""

    scenario: str
    name: str
    base_seed: int
    n_instances: int
    config_hash: str
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def metrics_doc(self) -> dict:
        return metrics_from_rows(self.rows, self.scenario, self.n_instances)

    def family(self, family: str, setup: str):
        return [r for r in self.rows if r.family == family and r.setup == setup]


def metrics_from_rows(rows, scenario: str, n_instances: int) -> dict:
    """NRMSE and averaged variance per (family, setup), from scored rows.

    Rebuilding the document from stored rows is the self-consistency
    contract: the CLI ``report`` command reproduces metrics.json from
    estimates.csv alone.
    """
    by_key = {}
    converged = {}
    for r in rows:
        by_key.setdefault((r.family, r.setup), {}).setdefault(r.instance, {})[
            (r.component, r.step)
        ] = (r.estimate, r.truth)
        converged.setdefault(r.setup, set()).add(r.instance)
    nrmse_doc, var_doc = {}, {}
    for (family, setup), per_instance in sorted(by_key.items()):
        comps = sorted({c for inst in per_instance.values() for c in inst})
        instances = sorted(per_instance)
        est = np.array(
            [[per_instance[i][c][0] for c in comps] for i in instances]
        )
        truth = np.array([per_instance[instances[0]][c][1] for c in comps])
        nrmse_doc.setdefault(family, {})[setup] = nrmse(est, truth)
        var_doc.setdefault(family, {})[setup] = variance_avg(est)
    return {
        "schema": 1,
        "scenario": scenario,
        "n_instances": n_instances,
        "converged": {s: len(v) for s, v in sorted(converged.items())},
        "nrmse": nrmse_doc,
        "var_avg": var_doc,
    }


def default_threads() -> int:
    env = os.environ.get("GRIDFUSE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_scenario(config: ScenarioConfig, threads: int | None = None,
                 opts: SolveOptions | None = None) -> RunReport:
    """Run the full Monte-Carlo study a scenario file describes.

    Deterministic for a given base_seed: instance k draws from seed
    base_seed + k regardless of scheduling. Non-converged instances are
    recorded in the report's failures and excluded from metrics.
    """
    threads = threads or default_threads()
    opts = opts or SolveOptions()
    case = config.load_case()
    fleet = config.build_fleet(case)
    truth = solve_combined_powerflow(case, fleet, windows=config.time_steps)
    noise = NoiseModel(rtu_sigma=config.rtu_sigma, der_sigma=config.der_sigma)

    est_fleet, true_params = fleet, {}
    if config.unknown_params and config.param_error:
        est_fleet, true_params = perturb_parameters(
            fleet, config.unknown_params, config.param_error
        )
    elif config.unknown_params:
        true_params = {
            p: _param_value(fleet, p) for p in config.unknown_params
        }

    def one_instance(idx: int):
        meas_list = synthesize_measurements(truth, noise, config.base_seed + idx)
        if config.bad_data:
            meas_list = inject_bad_data(meas_list, config.bad_data)
        rows, failures, times = [], [], []
        for setup in config.setups:
            try:
                t0 = time.perf_counter()
                if setup == "standalone":
                    rows.extend(
                        _run_standalone(idx, case, est_fleet, truth, meas_list,
                                        config.unknown_params, opts, true_params)
                    )
                else:
                    rows.extend(
                        _run_combined(idx, case, est_fleet, truth, meas_list,
                                      config.unknown_params, opts, true_params)
                    )
                times.append(time.perf_counter() - t0)
            except GridfuseError as e:
                failures.append((idx, setup, str(e)))
        return rows, failures, times

    indices = range(config.n_instances)
    if threads > 1 and config.n_instances > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_instance, indices))
    else:
        results = [one_instance(i) for i in indices]

    report = RunReport(
        scenario=config.scenario,
        name=config.name,
        base_seed=config.base_seed,
        n_instances=config.n_instances,
        config_hash=config.config_hash(),
    )
    for rows, failures, times in results:
        report.rows.extend(rows)
        report.failures.extend(failures)
        report.timings.extend(times)
    return report


def _param_value(fleet, path):
    comp, _, param = str(path).partition(".")
    for u in list(fleet.pvs) + list(fleet.batteries):
        if u.name == comp:
            return getattr(u.system, param)
    raise GridfuseError(f"unknown parameter path {path!r}")


def _params_for(name, unknown_params):
    return tuple(
        p.split(".", 1)[1] for p in unknown_params if p.startswith(f"{name}.")
    )


def _require_converged(est, what):
    if not est.converged:
        raise GridfuseError(f"{what} did not converge: {est.message}")
    return est


def _run_standalone(idx, case, fleet, truth: GroundTruth, meas_list,
                    unknown_params, opts, true_params):
    rows = []
    index = case.bus_index()
    prev = {
        u.name: (truth.steps[0].battery_states[u.name].v_oc,
                 truth.steps[0].battery_states[u.name].v_bt)
        for u in fleet.batteries
    }
    for k, meas in enumerate(meas_list, start=1):
        step = truth.steps[k]
        grid_meas = {b: [m] for b, m in meas.rtu.items()}
        for name, m in meas.poi.items():
            grid_meas.setdefault(m.bus, []).append(m)
        est = _require_converged(
            estimate_standalone_grid(case, grid_meas, opts=opts),
            f"stand-alone grid (window {k})",
        )
        rows.extend(_grid_rows(idx, "standalone", k, est, case, step))

        for unit in fleet.pvs:
            params = _params_for(unit.name, unknown_params)
            pv_est = _require_converged(
                estimate_standalone_pv(unit.system, meas.pv[unit.name],
                                       unknown_params=params, opts=opts,
                                       name=unit.name),
                f"stand-alone PV {unit.name} (window {k})",
            )
            rows.extend(_pv_rows(idx, "standalone", k, pv_est, unit, step))
            rows.extend(
                _param_rows(idx, "standalone", k, pv_est, unit.name,
                            unknown_params, true_params)
            )
        for unit in fleet.batteries:
            params = _params_for(unit.name, unknown_params)
            bt_est = _require_converged(
                estimate_standalone_battery(unit.system, meas.battery[unit.name],
                                            prev[unit.name], unknown_params=params,
                                            opts=opts, name=unit.name),
                f"stand-alone battery {unit.name} (window {k})",
            )
            ids = bt_est.meta["battery"][unit.name]
            prev[unit.name] = (bt_est.x[ids["v_oc"]], bt_est.x[ids["v_bt"]])
            rows.extend(
                _battery_rows(idx, "standalone", k, bt_est, unit, step,
                              truth.soc[unit.name][k])
            )
            rows.extend(
                _param_rows(idx, "standalone", k, bt_est, unit.name,
                            unknown_params, true_params)
            )
    return rows


def _run_combined(idx, case, fleet, truth: GroundTruth, meas_list,
                  unknown_params, opts, true_params):
    rows = []
    prev = {
        u.name: (truth.steps[0].battery_states[u.name].v_oc,
                 truth.steps[0].battery_states[u.name].v_bt)
        for u in fleet.batteries
    }
    for k, meas in enumerate(meas_list, start=1):
        step = truth.steps[k]
        est = _require_converged(
            solve_combined(case, fleet, meas, unknown_params=unknown_params,
                           prev=prev, opts=opts),
            f"combined estimation (window {k})",
        )
        rows.extend(_grid_rows(idx, "combined", k, est, case, step))
        for unit in fleet.pvs:
            rows.extend(_pv_rows(idx, "combined", k, est, unit, step))
            rows.extend(
                _param_rows(idx, "combined", k, est, unit.name,
                            unknown_params, true_params)
            )
        for unit in fleet.batteries:
            ids = est.meta["battery"][unit.name]
            prev[unit.name] = (est.x[ids["v_oc"]], est.x[ids["v_bt"]])
            rows.extend(
                _battery_rows(idx, "combined", k, est, unit, step,
                              truth.soc[unit.name][k])
            )
            rows.extend(
                _param_rows(idx, "combined", k, est, unit.name,
                            unknown_params, true_params)
            )
    return rows


def _grid_rows(idx, setup, k, est, case, step):
    rows = []
    index = case.bus_index()
    for b in case.buses:
        ivr, ivi = est.meta["bus"][b.id]
        vmag = float(np.hypot(est.x[ivr], est.x[ivi]))
        truth_mag = float(abs(step.voltages[index[b.id]]))
        rows.append(EstimateRow(idx, setup, "grid_v", f"bus{b.id}", k, vmag, truth_mag))
    return rows


def _pv_rows(idx, setup, k, est, unit, step):
    ids = est.meta["pv"][unit.name]
    st = step.pv_states[unit.name]
    v_sh, v_pv, i_pv = (est.x[ids["v_sh"]], est.x[ids["v_pv"]], est.x[ids["i_pv"]])
    return [
        EstimateRow(idx, setup, "v_pv", unit.name, k, float(v_pv), st.v_pv),
        EstimateRow(idx, setup, "v_sh", unit.name, k, float(v_sh), st.v_sh),
        EstimateRow(idx, setup, "i_pv", unit.name, k, float(i_pv), st.i_pv),
        EstimateRow(idx, setup, "p_dc", unit.name, k, float(i_pv * v_pv), st.p_pv),
    ]


def _battery_rows(idx, setup, k, est, unit, step, soc_truth):
    ids = est.meta["battery"][unit.name]
    st = step.battery_states[unit.name]
    sysb = unit.system
    v_bt, i_bt, v_oc = (est.x[ids["v_bt"]], est.x[ids["i_bt"]], est.x[ids["v_oc"]])
    v_soc = (v_oc - sysb.ocv_a) / sysb.ocv_b
    return [
        EstimateRow(idx, setup, "v_bt", unit.name, k, float(v_bt), st.v_bt),
        EstimateRow(idx, setup, "v_oc", unit.name, k, float(v_oc), st.v_oc),
        EstimateRow(idx, setup, "v_soc", unit.name, k, float(v_soc), float(soc_truth)),
        EstimateRow(idx, setup, "i_bt", unit.name, k, float(i_bt), st.i_bt),
        EstimateRow(idx, setup, "p_dc", unit.name, k, float(i_bt * v_bt), st.p_bt),
    ]


def _param_rows(idx, setup, k, est, name, unknown_params, true_params):
    rows = []
    for path, var in est.meta.get("params", {}).items():
        if not path.startswith(f"{name}."):
            continue
        g = est.x[var]
        if g == 0:
            raise GridfuseError(f"parameter {path} estimated at zero conductance")
        rows.append(
            EstimateRow(idx, setup, "params", path, k, float(1.0 / g),
                        float(true_params[path]))
        )
    return rows
