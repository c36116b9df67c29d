"""Command-line interface.

Subcommands: ``simulate`` (ground truth + one measurement draw),
``estimate`` (one instance through a chosen routine), ``montecarlo``
(a full scenario study), and ``report`` (recompute metrics from stored
estimates and render the figures).

Exit codes: 0 success, 1 usage, 2 data error, 3 solver non-convergence
(for montecarlo only when every instance fails).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import caseio
from .estimator import (
    estimate_standalone_battery,
    estimate_standalone_grid,
    estimate_standalone_pv,
    solve_combined,
)
from .exceptions import ConvergenceError, GridfuseError
from .forward import NoiseModel, inject_bad_data, perturb_parameters, \
    solve_combined_powerflow, synthesize_measurements
from .harness import EstimateRow, default_threads, metrics_from_rows, run_scenario

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridfuse",
        description="Circuit-theoretic joint parameter-state estimation "
                    "for grids with utility-scale PV and battery storage.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
            p.add_argument("--case", help="override the scenario's case path")
            p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="solve the truth and draw measurements")
    common(p)

    p = sub.add_parser("estimate", help="run one estimation instance")
    common(p)
    p.add_argument(
        "--routine",
        choices=["grid", "pv", "battery", "combined", "combined-param"],
        default="combined",
    )

    p = sub.add_parser("montecarlo", help="run the full Monte-Carlo scenario")
    common(p)
    p.add_argument("--instances", type=int, help="override instance count")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: GRIDFUSE_THREADS or all cores)")

    p = sub.add_parser("report", help="recompute metrics and render figures")
    p.add_argument("--out", required=True,
                   help="directory holding estimates.csv and manifest.json")
    return parser


def _load_config(args) -> caseio.ScenarioConfig:
    cfg = caseio.load_scenario(args.scenario)
    if getattr(args, "case", None):
        cfg = dataclasses.replace(cfg, case_path=args.case)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, base_seed=args.seed)
    if getattr(args, "instances", None):
        cfg = dataclasses.replace(cfg, n_instances=args.instances)
    return cfg


def _truth_rows(truth):
    rows = []
    index = truth.case.bus_index()
    for k in range(1, truth.windows + 1):
        step = truth.steps[k]
        for b in truth.case.buses:
            rows.append({"family": "grid_v", "component": f"bus{b.id}", "step": k,
                         "value": abs(step.voltages[index[b.id]])})
        for name, st in step.pv_states.items():
            for fam, val in (("v_pv", st.v_pv), ("v_sh", st.v_sh),
                             ("i_pv", st.i_pv), ("p_dc", st.p_pv)):
                rows.append({"family": fam, "component": name, "step": k, "value": val})
        for name, st in step.battery_states.items():
            for fam, val in (("v_bt", st.v_bt), ("v_oc", st.v_oc),
                             ("v_soc", st.v_soc), ("i_bt", st.i_bt),
                             ("p_dc", st.p_bt)):
                rows.append({"family": fam, "component": name, "step": k, "value": val})
    return rows


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    case = cfg.load_case()
    fleet = cfg.build_fleet(case)
    truth = solve_combined_powerflow(case, fleet, windows=cfg.time_steps)
    noise = NoiseModel(cfg.rtu_sigma, cfg.der_sigma)
    meas = synthesize_measurements(truth, noise, cfg.base_seed)
    if cfg.bad_data:
        meas = inject_bad_data(meas, cfg.bad_data)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "truth.json").write_text(
        json.dumps({"schema": 1, "rows": _truth_rows(truth)}, indent=1, sort_keys=True)
    )
    meas_doc = []
    for ms in meas:
        meas_doc.append({
            "window": ms.window,
            "rtu": {str(b): dataclasses.asdict(m) for b, m in sorted(ms.rtu.items())},
            "poi": {n: dataclasses.asdict(m) for n, m in sorted(ms.poi.items())},
            "pv": {n: dataclasses.asdict(m) for n, m in sorted(ms.pv.items())},
            "battery": {n: dataclasses.asdict(m) for n, m in sorted(ms.battery.items())},
            "dispatch": dict(sorted(ms.dispatch.items())),
        })
    (out / "measurements.json").write_text(
        json.dumps({"schema": 1, "windows": meas_doc}, indent=1, sort_keys=True)
    )
    print(f"wrote {out / 'truth.json'} and {out / 'measurements.json'}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    case = cfg.load_case()
    fleet = cfg.build_fleet(case)
    truth = solve_combined_powerflow(case, fleet, windows=cfg.time_steps)
    noise = NoiseModel(cfg.rtu_sigma, cfg.der_sigma)
    meas_list = synthesize_measurements(truth, noise, cfg.base_seed)
    if cfg.bad_data:
        meas_list = inject_bad_data(meas_list, cfg.bad_data)
    meas = meas_list[0]
    est_fleet = fleet
    unknown = tuple(cfg.unknown_params)
    if unknown and cfg.param_error:
        est_fleet, _ = perturb_parameters(fleet, unknown, cfg.param_error)

    routine = args.routine
    if routine == "grid":
        grid_meas = {b: [m] for b, m in meas.rtu.items()}
        for name, m in meas.poi.items():
            grid_meas.setdefault(m.bus, []).append(m)
        est = estimate_standalone_grid(case, grid_meas)
    elif routine == "pv":
        if not est_fleet.pvs:
            print("scenario has no PV system", file=sys.stderr)
            return EXIT_DATA
        unit = est_fleet.pvs[0]
        est = estimate_standalone_pv(unit.system, meas.pv[unit.name], name=unit.name)
    elif routine == "battery":
        if not est_fleet.batteries:
            print("scenario has no battery system", file=sys.stderr)
            return EXIT_DATA
        unit = est_fleet.batteries[0]
        st0 = truth.steps[0].battery_states[unit.name]
        est = estimate_standalone_battery(
            unit.system, meas.battery[unit.name], (st0.v_oc, st0.v_bt), name=unit.name
        )
    else:
        params = unknown if routine == "combined-param" else ()
        prev = {
            u.name: (truth.steps[0].battery_states[u.name].v_oc,
                     truth.steps[0].battery_states[u.name].v_bt)
            for u in est_fleet.batteries
        }
        est = solve_combined(case, est_fleet, meas, unknown_params=params, prev=prev)

    print(f"routine:       {routine}")
    print(f"converged:     {est.converged}")
    print(f"iterations:    {est.iterations}")
    print(f"objective:     {est.objective:.6e}")
    print(f"kkt residual:  {est.kkt_residual:.6e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "routine": routine,
            "converged": est.converged,
            "iterations": est.iterations,
            "objective": est.objective,
            "kkt_residual": est.kkt_residual,
            "values": {n: est.x[i] for n, i in est.meta["index"].items()},
        }
        (out / "estimate.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        print(f"wrote {out / 'estimate.json'}")
    return EXIT_OK if est.converged else EXIT_SOLVER


def cmd_montecarlo(args) -> int:
    cfg = _load_config(args)
    report = run_scenario(cfg, threads=args.threads)
    out = Path(args.out or f"run_{cfg.name or cfg.scenario}")
    paths = caseio.write_report(report, out)
    n_failed = len(report.failures)
    print(f"instances: {report.n_instances}  failed solves: {n_failed}")
    for key, path in paths.items():
        print(f"wrote {path}")
    if report.failures and not report.rows:
        print("every instance failed to converge", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    est_path = out / "estimates.csv"
    man_path = out / "manifest.json"
    if not est_path.exists() or not man_path.exists():
        print(f"missing estimates.csv or manifest.json in {out}", file=sys.stderr)
        return EXIT_DATA
    manifest = json.loads(man_path.read_text())
    rows = []
    with est_path.open() as fh:
        header = fh.readline().strip().split(",")
        expected = ["instance", "setup", "family", "component", "step", "estimate", "truth"]
        if header != expected:
            print("unrecognized estimates.csv header", file=sys.stderr)
            return EXIT_DATA
        for line in fh:
            inst, setup, family, comp, step, est, truth = line.rstrip("\n").split(",")
            rows.append(EstimateRow(int(inst), setup, family, comp, int(step),
                                    float(est), float(truth)))
    doc = metrics_from_rows(rows, manifest["scenario"], manifest["n_instances"])
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out / 'metrics.json'}")
    from .plots import render_figures

    for path in render_figures(rows, doc, out):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "montecarlo":
            return cmd_montecarlo(args)
        if args.command == "report":
            return cmd_report(args)
        return EXIT_USAGE
    except ConvergenceError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (GridfuseError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
