"""Case ingestion, scenario configuration, and result serialization.

Three file formats live here:

* a MATPOWER ``.m`` subset (baseMVA / bus / branch / gen blocks) for grid
  cases,
* a native, versioned JSON case format that round-trips ``GridCase``
  exactly,
* the scenario JSON schema that declares DER placements, noise levels,
  bad-data injections, unknown parameters and Monte-Carlo settings.

Report writing (``estimates.csv``, ``metrics.json``, ``manifest.json``) is
byte-stable for identical inputs: keys are sorted and floats are written
with full round-trip precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .der import (
    BatteryOperating,
    BatterySystem,
    BatteryUnit,
    DerFleet,
    InverterCurve,
    PvOperating,
    PvSystem,
    PvUnit,
    fit_inverter_curve,
    photocurrent,
)
from .exceptions import CaseFormatError, ScenarioError
from .network import Branch, Bus, GridCase

DATA_DIR = Path(__file__).parent / "data"

_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[", re.MULTILINE)


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _matrix_block(text: str, name: str):
    """Extract rows of an mpc.<name> = [...] block with source line numbers."""
    m = re.search(rf"mpc\.{name}\s*=\s*\[", text)
    if m is None:
        raise CaseFormatError(f"missing block mpc.{name}")
    start = m.end()
    end = text.find("]", start)
    if end < 0:
        raise CaseFormatError(f"unterminated block mpc.{name}")
    first_line = text.count("\n", 0, start) + 1
    rows = []
    for offset, raw in enumerate(text[start:end].split("\n")):
        line = _strip_comment(raw).strip().rstrip(";").strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            rows.append(([float(p) for p in parts], first_line + offset))
        except ValueError:
            raise CaseFormatError(
                f"line {first_line + offset}: non-numeric entry in mpc.{name}"
            ) from None
    return rows


def parse_matpower(text: str, name: str = "") -> GridCase:
    """Parse the supported MATPOWER subset into a GridCase.

    Supported columns: bus (id, type, Pd, Qd, Gs, Bs, Vm, Va), branch
    (f, t, r, x, b, status, plus tap/shift which must be nominal), gen
    (bus, Pg, Qg, Vg, status). Off-nominal taps or phase shifts are
    rejected with a diagnostic; out-of-service branches and generators
    are skipped. Buses with neither load nor generation become the
    zero-injection set; the rest are RTU-metered.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    if m is None:
        raise CaseFormatError("missing block mpc.baseMVA")
    base = float(m.group(1))
    if base <= 0:
        raise CaseFormatError("baseMVA must be positive")

    buses = []
    bus_types = {}
    load = {}
    for row, ln in _matrix_block(text, "bus"):
        if len(row) < 9:
            raise CaseFormatError(f"line {ln}: bus row needs >= 9 columns, got {len(row)}")
        bid = int(row[0])
        btype = int(row[1])
        if btype not in (1, 2, 3):
            raise CaseFormatError(f"line {ln}: unsupported bus type {btype}")
        pd, qd = row[2] / base, row[3] / base
        gs, bs = row[4] / base, row[5] / base
        vm, va = row[7], math.radians(row[8])
        buses.append(
            Bus(
                id=bid,
                v_real=vm * math.cos(va),
                v_imag=vm * math.sin(va),
                shunt_g=gs,
                shunt_b=bs,
            )
        )
        bus_types[bid] = btype
        load[bid] = (pd, qd)
    known = {b.id for b in buses}

    branches = []
    for row, ln in _matrix_block(text, "branch"):
        if len(row) == 6:
            f, t, r, x, ch, status = row
            ratio, angle = 0.0, 0.0
        elif len(row) >= 11:
            f, t, r, x, ch = row[0], row[1], row[2], row[3], row[4]
            ratio, angle, status = row[8], row[9], row[10]
        else:
            raise CaseFormatError(
                f"line {ln}: branch row needs 6 or >= 11 columns, got {len(row)}"
            )
        if int(status) == 0:
            continue
        if ratio not in (0.0, 1.0) or angle != 0.0:
            raise CaseFormatError(
                f"line {ln}: off-nominal tap/phase-shift branches are not supported"
            )
        if int(f) not in known or int(t) not in known:
            raise CaseFormatError(f"line {ln}: branch references unknown bus")
        den = r * r + x * x
        if den == 0:
            raise CaseFormatError(f"line {ln}: branch with zero impedance")
        branches.append(
            Branch(
                from_bus=int(f),
                to_bus=int(t),
                g=r / den,
                b=-x / den,
                shunt_b=ch,
            )
        )

    gen_p = {}
    gen_setpoints = {}
    for row, ln in _matrix_block(text, "gen"):
        if len(row) == 5:
            gbus, pg, qg, vg, status = row
        elif len(row) >= 8:
            gbus, pg, qg, vg, status = row[0], row[1], row[2], row[5], row[7]
        else:
            raise CaseFormatError(f"line {ln}: gen row needs 5 or >= 8 columns, got {len(row)}")
        if int(status) == 0:
            continue
        gbus = int(gbus)
        if gbus not in known:
            raise CaseFormatError(f"line {ln}: gen references unknown bus {gbus}")
        pg_pu, qg_pu = pg / base, qg / base
        prev = gen_p.get(gbus, (0.0, 0.0))
        gen_p[gbus] = (prev[0] + pg_pu, prev[1] + qg_pu)
        gen_setpoints[gbus] = (gen_p[gbus][0], vg)

    slack = [b for b, t in bus_types.items() if t == 3]
    if not slack:
        raise CaseFormatError("missing slack (type 3) bus")

    injected = []
    rtu, zi = set(), set()
    for bus in buses:
        pd, qd = load[bus.id]
        pg, qg = gen_p.get(bus.id, (0.0, 0.0))
        has_injection = (
            pd != 0 or qd != 0 or bus.id in gen_p or bus_types[bus.id] in (2, 3)
        )
        if has_injection:
            rtu.add(bus.id)
        else:
            zi.add(bus.id)
        injected.append(
            Bus(
                id=bus.id,
                v_real=bus.v_real,
                v_imag=bus.v_imag,
                injection=(pg - pd, qg - qd),
                shunt_g=bus.shunt_g,
                shunt_b=bus.shunt_b,
            )
        )

    return GridCase(
        base_mva=base,
        buses=tuple(injected),
        branches=tuple(branches),
        rtu_buses=frozenset(rtu),
        zero_injection_buses=frozenset(zi),
        slack_bus=slack[0],
        name=name,
        bus_types=bus_types,
        gen_setpoints=gen_setpoints,
    )


def case_to_json(case: GridCase) -> str:
    """Serialize a GridCase to the native versioned JSON format."""
    doc = {
        "schema": 1,
        "name": case.name,
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [
            {
                "id": b.id,
                "v_real": b.v_real,
                "v_imag": b.v_imag,
                "injection": list(b.injection) if b.injection else None,
                "shunt_g": b.shunt_g,
                "shunt_b": b.shunt_b,
                "type": case.bus_types.get(b.id, 1),
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "g": br.g,
                "b": br.b,
                "shunt_b": br.shunt_b,
            }
            for br in case.branches
        ],
        "rtu_buses": sorted(case.rtu_buses),
        "zero_injection_buses": sorted(case.zero_injection_buses),
        "gen_setpoints": {str(k): list(v) for k, v in sorted(case.gen_setpoints.items())},
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def case_from_json(text: str) -> GridCase:
    """Parse the native JSON case format."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseFormatError(f"invalid case JSON: {e}") from None
    if doc.get("schema") != 1:
        raise CaseFormatError("unsupported case schema version")
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                v_real=float(b["v_real"]),
                v_imag=float(b["v_imag"]),
                injection=tuple(b["injection"]) if b.get("injection") else None,
                shunt_g=float(b.get("shunt_g", 0.0)),
                shunt_b=float(b.get("shunt_b", 0.0)),
            )
            for b in doc["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                g=float(br["g"]),
                b=float(br["b"]),
                shunt_b=float(br.get("shunt_b", 0.0)),
            )
            for br in doc["branches"]
        )
        return GridCase(
            base_mva=float(doc["base_mva"]),
            buses=buses,
            branches=branches,
            rtu_buses=frozenset(doc["rtu_buses"]),
            zero_injection_buses=frozenset(doc["zero_injection_buses"]),
            slack_bus=int(doc["slack_bus"]),
            name=doc.get("name", ""),
            bus_types={int(b["id"]): int(b.get("type", 1)) for b in doc["buses"]},
            gen_setpoints={
                int(k): tuple(v) for k, v in doc.get("gen_setpoints", {}).items()
            },
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CaseFormatError(f"malformed case JSON: {e}") from None


def load_case(path) -> GridCase:
    """Load a case file, dispatching on extension (.m or .json)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return case_from_json(text)
    return parse_matpower(text, name=path.stem)


def tile_case(case: GridCase, copies: int) -> GridCase:
    """Tile a case into ``copies`` replicas joined by weak tie lines.

    Bus ids of replica k are offset by k * stride; only the first replica
    keeps the slack, the other replicas' slack generators become PV buses.
    Used to synthesize the large desk-scale cases.
    """
    if copies < 1:
        raise CaseFormatError("copies must be >= 1")
    if copies == 1:
        return case
    stride = max(b.id for b in case.buses) + 1
    buses, branches = [], []
    rtu, zi = set(), set()
    bus_types, gens = {}, {}
    for k in range(copies):
        off = k * stride
        for b in case.buses:
            buses.append(
                Bus(
                    id=b.id + off,
                    v_real=b.v_real,
                    v_imag=b.v_imag,
                    injection=b.injection,
                    shunt_g=b.shunt_g,
                    shunt_b=b.shunt_b,
                )
            )
        for br in case.branches:
            branches.append(
                Branch(br.from_bus + off, br.to_bus + off, br.g, br.b, br.shunt_b)
            )
        rtu |= {i + off for i in case.rtu_buses}
        zi |= {i + off for i in case.zero_injection_buses}
        for bid, t in case.bus_types.items():
            if t == 3 and k > 0:
                t = 2
            bus_types[bid + off] = t
        for bid, sp in case.gen_setpoints.items():
            gens[bid + off] = sp
        if k > 0:
            # tie line from the previous replica's slack to this one's
            branches.append(
                Branch(case.slack_bus + (k - 1) * stride, case.slack_bus + off,
                       g=1.0, b=-20.0)
            )
    return GridCase(
        base_mva=case.base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        rtu_buses=frozenset(rtu),
        zero_injection_buses=frozenset(zi),
        slack_bus=case.slack_bus,
        name=f"{case.name}_x{copies}",
        bus_types=bus_types,
        gen_setpoints=gens,
    )


# --------------------------------------------------------------------------
# scenario configuration


@dataclass(frozen=True)
class BadDataSpec:
    component: str
    channel: str
    bias: float


@dataclass
class ScenarioConfig:
    """A fully resolved scenario: case, fleet, noise, and run settings."""

    scenario: str
    case_path: str
    ders: list = field(default_factory=list)
    rtu_sigma: float = 0.001
    der_sigma: float = 0.1
    bad_data: list = field(default_factory=list)
    unknown_params: list = field(default_factory=list)
    param_error: float = 0.0
    n_instances: int = 1
    base_seed: int = 0
    time_steps: int = 1
    dt: float = 300.0
    setups: tuple = ("standalone", "combined")
    tile_copies: int = 1
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def load_case(self) -> GridCase:
        path = Path(self.case_path)
        if not path.is_absolute() and not path.exists():
            candidate = DATA_DIR / path
            if candidate.exists():
                path = candidate
        case = load_case(path)
        if self.tile_copies > 1:
            case = tile_case(case, self.tile_copies)
        return case

    def build_fleet(self, case: GridCase) -> DerFleet:
        return _build_fleet(self.ders, case, self.time_steps, self.dt)


def _require(doc: dict, key: str, ctx: str):
    if key not in doc:
        raise ScenarioError(f"{ctx}: missing field {key!r}")
    return doc[key]


def _inverter_from(doc: dict, ctx: str, kind: str) -> InverterCurve:
    if "m" in doc and "gamma" in doc:
        return InverterCurve(m=float(doc["m"]), gamma=float(doc["gamma"]), kind=kind)
    try:
        return fit_inverter_curve(
            float(_require(doc, "p_low", ctx)),
            float(_require(doc, "eta_low", ctx)),
            float(_require(doc, "p_rated", ctx)),
            float(_require(doc, "eta_rated", ctx)),
            kind=kind,
        )
    except ScenarioError:
        raise
    except Exception as e:
        raise ScenarioError(f"{ctx}: {e}") from None


def _build_fleet(ders: list, case: GridCase, time_steps: int, dt: float) -> DerFleet:
    known = {b.id for b in case.buses}
    pvs, batteries = [], []
    for i, d in enumerate(ders):
        ctx = f"ders[{i}]"
        kind = _require(d, "kind", ctx)
        bus = int(_require(d, "bus", ctx))
        if bus not in known:
            raise ScenarioError(f"{ctx}: bus {bus} not in case")
        name = d.get("name", f"{kind}{i}")
        if kind == "pv":
            system = PvSystem(
                bus=bus,
                r_s=float(_require(d, "r_s", ctx)),
                r_sh=float(_require(d, "r_sh", ctx)),
                i_0=float(_require(d, "i_0", ctx)),
                a=float(_require(d, "a", ctx)),
                n_parallel_scale=float(d.get("n_parallel_scale", 1.0)),
            )
            if "i_ph" in d:
                i_ph = float(d["i_ph"])
            else:
                i_ph = photocurrent(
                    float(_require(d, "i_ph_stc", ctx)),
                    float(d.get("irradiance", 1000.0)),
                    float(d.get("temp_cell_c", 25.0)),
                    float(d.get("alpha_t", 0.0005)),
                    scale=system.n_parallel_scale,
                )
            pvs.append(
                PvUnit(
                    name=name,
                    system=system,
                    op=PvOperating(i_ph=i_ph, v_dc=float(_require(d, "v_dc", ctx))),
                    inverter=_inverter_from(_require(d, "inverter", ctx), ctx, "inversion"),
                    poi_rtu=bool(d.get("poi_rtu", True)),
                )
            )
        elif kind == "battery":
            schedule = _require(d, "schedule", ctx)
            currents = []
            if schedule and isinstance(schedule[0], dict):
                for blk in schedule:
                    currents += [float(blk["i_bt"])] * int(blk["windows"])
            else:
                currents = [float(v) for v in schedule]
            if len(currents) < time_steps:
                raise ScenarioError(
                    f"{ctx}: schedule covers {len(currents)} windows, need {time_steps}"
                )
            currents = currents[:time_steps]
            nodes = tuple([currents[0]] + currents)
            dispatch = tuple(
                "discharging" if c >= 0 else "charging" for c in currents
            )
            r_sd = d.get("r_sd")
            system = BatterySystem(
                bus=bus,
                c_cap=float(_require(d, "c_cap", ctx)),
                r_se=float(_require(d, "r_se", ctx)),
                r_sd=float(r_sd) if r_sd is not None else math.inf,
                ocv_a=float(_require(d, "ocv_a", ctx)),
                ocv_b=float(_require(d, "ocv_b", ctx)),
                dispatch=dispatch,
                dt=dt,
            )
            batteries.append(
                BatteryUnit(
                    name=name,
                    system=system,
                    op=BatteryOperating(
                        v_soc0=float(_require(d, "v_soc0", ctx)), i_schedule=nodes
                    ),
                    inverter=_inverter_from(_require(d, "inverter", ctx), ctx, "inversion"),
                    rectifier=_inverter_from(
                        d.get("rectifier", _require(d, "inverter", ctx)), ctx, "rectification"
                    ),
                    poi_rtu=bool(d.get("poi_rtu", True)),
                )
            )
        else:
            raise ScenarioError(f"{ctx}: unknown DER kind {kind!r}")
    return DerFleet(pvs=tuple(pvs), batteries=tuple(batteries))


def load_scenario(source) -> ScenarioConfig:
    """Load and validate a scenario JSON file, dict, or JSON string."""
    if isinstance(source, dict):
        doc = source
        name = doc.get("name", "")
    else:
        path = Path(source)
        if path.exists():
            doc = json.loads(path.read_text())
            name = doc.get("name", path.stem)
        else:
            doc = json.loads(str(source))
            name = doc.get("name", "")
    if doc.get("schema") != 1:
        raise ScenarioError("missing or unsupported field 'schema' (expected 1)")
    scenario = _require(doc, "scenario", "scenario file")
    if scenario not in ("A", "B", "C"):
        raise ScenarioError(f"field 'scenario' must be A, B or C, got {scenario!r}")
    noise = doc.get("noise", {})
    cfg = ScenarioConfig(
        scenario=scenario,
        case_path=str(_require(doc, "case_path", "scenario file")),
        ders=list(doc.get("ders", [])),
        rtu_sigma=float(noise.get("rtu_sigma", 0.001)),
        der_sigma=float(noise.get("der_sigma", 0.1)),
        bad_data=[
            BadDataSpec(
                component=str(_require(b, "component", "bad_data")),
                channel=str(_require(b, "channel", "bad_data")),
                bias=float(_require(b, "bias", "bad_data")),
            )
            for b in doc.get("bad_data", [])
        ],
        unknown_params=list(doc.get("unknown_params", [])),
        param_error=float(doc.get("param_error", 0.0)),
        n_instances=int(doc.get("n_instances", 1)),
        base_seed=int(doc.get("base_seed", 0)),
        time_steps=int(doc.get("time_steps", 1)),
        dt=float(doc.get("dt", 300.0)),
        setups=tuple(doc.get("setups", ["standalone", "combined"])),
        tile_copies=int(doc.get("tile_copies", 1)),
        name=name,
        raw=doc,
    )
    if cfg.n_instances < 1:
        raise ScenarioError("field 'n_instances' must be >= 1")
    if cfg.rtu_sigma < 0 or cfg.der_sigma < 0:
        raise ScenarioError("field 'noise' sigmas must be nonnegative")
    if cfg.time_steps < 1:
        raise ScenarioError("field 'time_steps' must be >= 1")
    for s in cfg.setups:
        if s not in ("standalone", "combined"):
            raise ScenarioError(f"field 'setups' has unknown entry {s!r}")
    # cross-validate DER placement and parameter paths eagerly
    case = cfg.load_case()
    fleet = cfg.build_fleet(case)
    der_names = {u.name for u in fleet.pvs} | {u.name for u in fleet.batteries}
    for path in cfg.unknown_params:
        comp, _, param = str(path).partition(".")
        if comp not in der_names:
            raise ScenarioError(f"unknown_params: no DER named {comp!r}")
        if param not in ("r_s", "r_sh", "r_se"):
            raise ScenarioError(f"unknown_params: unsupported parameter {param!r}")
        is_pv = any(u.name == comp for u in fleet.pvs)
        if is_pv and param == "r_se" or (not is_pv and param != "r_se"):
            raise ScenarioError(f"unknown_params: {param!r} does not exist on {comp!r}")
    for b in cfg.bad_data:
        if b.component not in der_names and not b.component.startswith("rtu:"):
            raise ScenarioError(f"bad_data: no DER named {b.component!r}")
    return cfg


# --------------------------------------------------------------------------
# report serialization


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_report(report, out_dir) -> dict:
    """Write estimates.csv, metrics.json, manifest.json and timings.json.

    Returns the paths written. Output bytes depend only on the report's
    rows/metrics (timing lives in the separate timings.json), so identical
    runs serialize identically.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    header = "instance,setup,family,component,step,estimate,truth\n"
    lines = [header]
    for row in report.rows:
        lines.append(
            ",".join(
                [
                    str(row.instance),
                    row.setup,
                    row.family,
                    row.component,
                    str(row.step),
                    _fmt(row.estimate),
                    _fmt(row.truth),
                ]
            )
            + "\n"
        )
    paths["estimates"] = out / "estimates.csv"
    paths["estimates"].write_text("".join(lines))

    paths["metrics"] = out / "metrics.json"
    paths["metrics"].write_text(
        json.dumps(report.metrics_doc(), indent=1, sort_keys=True) + "\n"
    )

    manifest = {
        "schema": 1,
        "scenario": report.scenario,
        "name": report.name,
        "base_seed": report.base_seed,
        "n_instances": report.n_instances,
        "config_hash": report.config_hash,
    }
    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    paths["timings"] = out / "timings.json"
    paths["timings"].write_text(
        json.dumps({"solve_seconds": report.timings}, indent=1) + "\n"
    )
    return paths
