"""Circuit-theoretic joint parameter-state estimation for grids with DERs."""

from .der import (
    BatteryMeasurement,
    BatterySystem,
    BatteryState,
    DerFleet,
    InverterCurve,
    PvMeasurement,
    PvSystem,
    PvState,
    diode_current,
    inverter_efficiency,
)
from .estimator import (
    Estimates,
    EstimationProblem,
    SolveOptions,
    assemble_combined,
    estimate_standalone_battery,
    estimate_standalone_grid,
    estimate_standalone_pv,
    solve,
    solve_combined,
)
from .exceptions import CaseFormatError, ConvergenceError, GridfuseError, ScenarioError
from .forward import (
    GroundTruth,
    MeasurementSet,
    NoiseModel,
    inject_bad_data,
    perturb_parameters,
    solve_combined_powerflow,
    step_soc,
    synthesize_measurements,
)
from .caseio import (
    ScenarioConfig,
    case_from_json,
    case_to_json,
    load_case,
    load_scenario,
    parse_matpower,
    tile_case,
    write_report,
)
from .harness import RunReport, run_scenario
from .metrics import absolute_error, estimation_error, nrmse, variance_avg
from .network import (
    Branch,
    Bus,
    GridCase,
    RtuMeasurement,
    build_admittance,
    feature_transform,
    grid_kcl_residual,
    load_current,
    rtu_injection_residual,
)

__version__ = "0.1.0"
