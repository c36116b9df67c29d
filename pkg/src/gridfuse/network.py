"""AC grid equivalent-circuit model.

Buses, branches, the nodal admittance matrix, RTU measurement circuits in
their feature-transformed (conductance/susceptance) form, and the KCL
residuals used both by the forward simulator and the estimator.

All AC quantities are per-unit on the case's MVA base. Types are immutable
after construction; the residual functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import GridfuseError


@dataclass(frozen=True)
class Bus:
    """A network bus.

    ``v_real``/``v_imag`` hold a per-unit operating point (1, 0 for an
    unsolved case). ``injection`` is the ground-truth net (P, Q) injection
    in per unit (generation minus load), carried only by solved cases.
    ``shunt_g``/``shunt_b`` are per-unit shunt admittance to ground.
    """

    id: int
    v_real: float = 1.0
    v_imag: float = 0.0
    injection: tuple[float, float] | None = None
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    """A series pi-model branch between two buses.

    ``g``/``b`` are the per-unit series admittance, ``shunt_b`` the total
    per-unit line-charging susceptance (half stamped at each end).
    """

    from_bus: int
    to_bus: int
    g: float
    b: float
    shunt_b: float = 0.0

    def __post_init__(self):
        if self.g == 0.0 and self.b == 0.0:
            raise GridfuseError(
                f"branch {self.from_bus}-{self.to_bus} has zero admittance"
            )


@dataclass(frozen=True)
class GridCase:
    """A transmission network: buses, branches, and measurement placement.

    ``rtu_buses`` is the set of buses whose net conventional injection is
    metered by an RTU; ``zero_injection_buses`` the set with no load or
    generation (their KCL holds exactly). The two sets are disjoint; the
    remainder are unmeasured nonzero-injection buses.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    rtu_buses: frozenset[int]
    zero_injection_buses: frozenset[int]
    slack_bus: int
    name: str = ""
    bus_types: dict[int, int] = field(default_factory=dict, compare=False)
    gen_setpoints: dict[int, tuple[float, float]] = field(
        default_factory=dict, compare=False
    )

    def __post_init__(self):
        if self.base_mva <= 0:
            raise GridfuseError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridfuseError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise GridfuseError(
                    f"branch {br.from_bus}-{br.to_bus} references unknown bus"
                )
        if self.rtu_buses & self.zero_injection_buses:
            raise GridfuseError(
                "rtu_buses and zero_injection_buses must be disjoint"
            )
        for s in (self.rtu_buses, self.zero_injection_buses):
            if not s <= known:
                raise GridfuseError("measurement set references unknown bus")
        if self.slack_bus not in known:
            raise GridfuseError("slack bus is not a declared bus")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> dense position (declaration order)."""
        return {b.id: k for k, b in enumerate(self.buses)}


@dataclass(frozen=True)
class RtuMeasurement:
    """An RTU triple (P, Q, |V|) and its derived circuit elements.

    Sign convention: ``p_z`` is the net real power injected into the bus by
    the measured element (generation minus load); ``q_z`` is the net
    reactive power drawn (load minus generation). That pairing makes the
    affine measurement circuit I = (G_z + jB_z) V + n, oriented into the
    bus, exact at the true operating point.
    """

    bus: int
    p_z: float
    q_z: float
    v_z: float
    sigma: float
    biased: bool = False

    def __post_init__(self):
        if self.v_z <= 0.0:
            raise GridfuseError("invalid voltage magnitude measurement")
        if self.sigma < 0.0:
            raise GridfuseError("sigma must be nonnegative")

    @property
    def g_z(self) -> float:
        return self.p_z / self.v_z**2

    @property
    def b_z(self) -> float:
        return self.q_z / self.v_z**2

    @property
    def weight(self) -> float:
        return 1.0 / self.sigma**2 if self.sigma > 0 else 1.0


def feature_transform(p_z: float, q_z: float, v_z: float) -> tuple[float, float]:
    """Convert an RTU (P, Q, |V|) triple into circuit elements (G_z, B_z).

    G_z = P_z / |V|_z^2 and B_z = Q_z / |V|_z^2; the transform is what makes
    the RTU constraints affine in the bus voltage.
    """
    if v_z <= 0.0:
        raise GridfuseError("invalid voltage magnitude measurement")
    v2 = v_z * v_z
    return p_z / v2, q_z / v2


def rtu_injection_residual(v_real, v_imag, g_z, b_z, n_real, n_imag, i_real, i_imag):
    """Affine RTU measurement-circuit residual.

    Zero when the circuit current (i_real, i_imag) matches the
    feature-transformed measurement plus its noise variables:

        r_r = G_z V^r - B_z V^i + n^r - I^r
        r_i = G_z V^i + B_z V^r + n^i - I^i
    """
    r_r = g_z * v_real - b_z * v_imag + n_real - i_real
    r_i = g_z * v_imag + b_z * v_real + n_imag - i_imag
    return r_r, r_i


def load_current(p: float, q: float, v_real: float, v_imag: float):
    """Current drawn by a (P, Q) load at complex voltage (v_real, v_imag)."""
    vmag2 = v_real * v_real + v_imag * v_imag
    if vmag2 <= 0.0:
        raise GridfuseError("singular load current")
    i_r = (p * v_real + q * v_imag) / vmag2
    i_i = (p * v_imag - q * v_real) / vmag2
    return i_r, i_i


class Admittance:
    """Sparse nodal admittance of a GridCase.

    ``ybus`` is the complex bus admittance matrix (CSR) over the dense bus
    ordering of ``case.buses``; shunts (line charging and bus shunts) are
    stamped on the diagonal, branch admittance negated off-diagonal.
    """

    def __init__(self, case: GridCase, ybus: sp.csr_matrix, index: dict[int, int]):
        self.case = case
        self.ybus = ybus
        self.index = index

    def injection_current(self, voltages: np.ndarray) -> np.ndarray:
        """Complex branch-and-shunt current leaving each bus, Y @ V."""
        return self.ybus @ voltages


def build_admittance(case: GridCase) -> Admittance:
    """Stamp the nodal admittance matrix for a case.

    Parallel branches between the same pair sum; a bus with no incident
    branch is rejected as disconnected.
    """
    index = case.bus_index()
    n = case.n_bus
    rows, cols, vals = [], [], []
    touched = np.zeros(n, dtype=bool)
    for br in case.branches:
        i, j = index[br.from_bus], index[br.to_bus]
        y = complex(br.g, br.b)
        ysh = complex(0.0, br.shunt_b / 2.0)
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [y + ysh, y + ysh, -y, -y]
        touched[i] = touched[j] = True
    for bus in case.buses:
        if bus.shunt_g or bus.shunt_b:
            k = index[bus.id]
            rows.append(k)
            cols.append(k)
            vals.append(complex(bus.shunt_g, bus.shunt_b))
    if not touched.all():
        bad = case.buses[int(np.flatnonzero(~touched)[0])].id
        raise GridfuseError(f"disconnected bus {bad}")
    ybus = sp.csr_matrix(
        (np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n)
    )
    ybus.sum_duplicates()
    return Admittance(case, ybus, index)


def grid_kcl_residual(
    adm: Admittance,
    bus: int,
    voltages: np.ndarray,
    device_currents: tuple[float, float] = (0.0, 0.0),
):
    """KCL residual at one bus: branch/shunt current out minus injections in.

    ``voltages`` is the complex bus-voltage vector in dense order;
    ``device_currents`` is the total complex current injected into the bus
    by attached elements (RTU circuits, DER couplings, generators/loads),
    as an (I^r, I^i) pair. Zero at any physically consistent state.
    """
    if bus not in adm.index:
        raise GridfuseError(f"unknown bus id {bus}")
    k = adm.index[bus]
    i_out = adm.ybus[k, :] @ voltages
    i_out = complex(i_out[0] if np.ndim(i_out) else i_out)
    return i_out.real - device_currents[0], i_out.imag - device_currents[1]
