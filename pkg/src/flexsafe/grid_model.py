"""Static grid data model: buses, branches, flexible units, fixed loads.

Grid files carry physical units (MW / MVAr / kV); everything in memory is
per-unit on ``s_base``.  The model is immutable after load -- controller
updates go through :func:`apply_control`, which returns a new value, so a
single model can be shared freely across concurrent trials.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

LOAD_CLASSES = ("household", "industry", "commercial")

SLACK = "slack"
PQ = "pq"

#: Excess beyond a unit bound that is clipped silently; anything larger is
#: still clipped but reported as a ClipEvent.
CLIP_TOL = 1e-9


class GridError(Exception):
    """Base class for grid model errors."""


class GridLoadError(GridError):
    """Grid file missing, malformed, or failing the documented schema."""


class GridValidationError(GridError):
    """A structural invariant of the grid model is violated."""

    def __init__(self, findings: list[str]):
        super().__init__(findings[0] if findings else "invalid grid")
        self.findings = list(findings)


@dataclass(frozen=True)
class Bus:
    id: str
    bus_type: str  # "slack" | "pq"
    v_kv: float
    v_min: float  # p.u.
    v_max: float  # p.u.


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    r: float  # series resistance, p.u.
    x: float  # series reactance, p.u.
    b: float = 0.0  # total shunt susceptance, p.u.
    tap: float = 1.0  # off-nominal ratio at the from end
    s_max: float = math.inf  # apparent-flow limit, p.u.; inf = unlimited


@dataclass(frozen=True)
class FlexUnit:
    id: str
    bus: str
    p_min: float  # p.u.
    p_max: float
    q_min: float
    q_max: float
    controllable: bool = True
    p: float = 0.0  # current set point, p.u. (injection positive)
    q: float = 0.0


@dataclass(frozen=True)
class FixedLoad:
    id: str
    bus: str
    p: float  # p.u., consumption positive
    q: float
    load_class: str


@dataclass(frozen=True)
class ClipEvent:
    unit: str
    field: str  # "p" | "q"
    requested: float
    bound: float


@dataclass(frozen=True)
class GridModel:
    """Validated network snapshot, per-unit on ``s_base``.

    Voltage and flow limits plus the FlexUnit boxes are the inequality
    constraints enforced by the controller; the nodal power balances the
    power-flow solver drives to zero are the matching equalities.
    """

    s_base: float  # MVA
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    flex_units: tuple[FlexUnit, ...]
    fixed_loads: tuple[FixedLoad, ...]
    pcc: str  # branch id of the coupling branch to the superimposed grid

    # ---- index helpers -------------------------------------------------

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[str, int]:
        return {br.id: i for i, br in enumerate(self.branches)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack_index(self) -> int:
        idx = [i for i, bus in enumerate(self.buses) if bus.bus_type == SLACK]
        if len(idx) != 1:
            raise GridValidationError([f"expected exactly one slack bus, found {len(idx)}"])
        return idx[0]

    @cached_property
    def pq_indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_bus) if i != self.slack_index)

    @cached_property
    def pcc_index(self) -> int:
        return self.branch_index[self.pcc]

    @cached_property
    def ctrl_indices(self) -> tuple[int, ...]:
        """Indices into flex_units of the controllable units, in declaration order."""
        return tuple(i for i, fu in enumerate(self.flex_units) if fu.controllable)

    @property
    def n_ctrl(self) -> int:
        return len(self.ctrl_indices)

    # ---- limit and injection vectors ------------------------------------

    @cached_property
    def v_min(self) -> np.ndarray:
        out = np.array([bus.v_min for bus in self.buses])
        out.flags.writeable = False
        return out

    @cached_property
    def v_max(self) -> np.ndarray:
        out = np.array([bus.v_max for bus in self.buses])
        out.flags.writeable = False
        return out

    @cached_property
    def s_max(self) -> np.ndarray:
        out = np.array([br.s_max for br in self.branches])
        out.flags.writeable = False
        return out

    def control_vector(self) -> np.ndarray:
        """Current set points of controllable units, ordered [p_1..p_j, q_1..q_j]."""
        units = [self.flex_units[i] for i in self.ctrl_indices]
        return np.array([fu.p for fu in units] + [fu.q for fu in units])

    def control_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        units = [self.flex_units[i] for i in self.ctrl_indices]
        lower = np.array([fu.p_min for fu in units] + [fu.q_min for fu in units])
        upper = np.array([fu.p_max for fu in units] + [fu.q_max for fu in units])
        return lower, upper

    def bus_injections(self) -> np.ndarray:
        """Net complex injection per bus (generation positive), p.u."""
        s = np.zeros(self.n_bus, dtype=complex)
        for fu in self.flex_units:
            s[self.bus_index[fu.bus]] += fu.p + 1j * fu.q
        for ld in self.fixed_loads:
            s[self.bus_index[ld.bus]] -= ld.p + 1j * ld.q
        return s

    # ---- network matrices ------------------------------------------------

    @cached_property
    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=int)
        f.flags.writeable = False
        t.flags.writeable = False
        return f, t

    @cached_property
    def branch_admittance(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Two-port admittances (yff, yft, ytf, ytt) of the branch pi model."""
        ys = np.array([1.0 / (br.r + 1j * br.x) for br in self.branches])
        bc = np.array([br.b for br in self.branches])
        tap = np.array([br.tap for br in self.branches])
        yff = (ys + 0.5j * bc) / tap**2
        yft = -ys / tap
        ytf = -ys / tap
        ytt = ys + 0.5j * bc
        for arr in (yff, yft, ytf, ytt):
            arr.flags.writeable = False
        return yff, yft, ytf, ytt

    @cached_property
    def ybus(self) -> np.ndarray:
        n = self.n_bus
        f, t = self.branch_ends
        yff, yft, ytf, ytt = self.branch_admittance
        y = np.zeros((n, n), dtype=complex)
        np.add.at(y, (f, f), yff)
        np.add.at(y, (f, t), yft)
        np.add.at(y, (t, f), ytf)
        np.add.at(y, (t, t), ytt)
        y.flags.writeable = False
        return y


def control_labels(grid: GridModel) -> tuple[str, ...]:
    """Column labels of the control vector, matching its layout."""
    units = [grid.flex_units[i] for i in grid.ctrl_indices]
    return tuple(f"p:{fu.id}" for fu in units) + tuple(f"q:{fu.id}" for fu in units)


# ---- file format ---------------------------------------------------------


def _load_schema() -> dict:
    text = resources.files("flexsafe.schemas").joinpath("grid.schema.json").read_text()
    return json.loads(text)


def load_grid(path: str | Path) -> GridModel:
    """Load and validate a grid file; returns a per-unit GridModel.

    Raises GridLoadError on parse/schema problems and GridValidationError
    naming the first violated structural invariant.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise GridLoadError(f"cannot read grid file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise GridLoadError(f"malformed grid file {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, _load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise GridLoadError(f"grid file {path} violates schema at {where}: {exc.message}") from exc

    s_base = float(doc["s_base_mva"])
    buses = tuple(
        Bus(
            id=b["id"],
            bus_type=b["type"],
            v_kv=float(b["v_kv"]),
            v_min=float(b["v_min_pu"]),
            v_max=float(b["v_max_pu"]),
        )
        for b in doc["buses"]
    )
    branches = tuple(
        Branch(
            id=b["id"],
            from_bus=b["from"],
            to_bus=b["to"],
            r=float(b["r_pu"]),
            x=float(b["x_pu"]),
            b=float(b.get("b_pu", 0.0)),
            tap=float(b.get("tap", 1.0)),
            s_max=math.inf if b.get("s_max_mva") is None else float(b["s_max_mva"]) / s_base,
        )
        for b in doc["branches"]
    )
    flex_units = tuple(
        FlexUnit(
            id=u["id"],
            bus=u["bus"],
            p_min=float(u["p_min_mw"]) / s_base,
            p_max=float(u["p_max_mw"]) / s_base,
            q_min=float(u["q_min_mvar"]) / s_base,
            q_max=float(u["q_max_mvar"]) / s_base,
            controllable=bool(u.get("controllable", True)),
            p=float(u.get("p_mw", 0.0)) / s_base,
            q=float(u.get("q_mvar", 0.0)) / s_base,
        )
        for u in doc.get("flex_units", [])
    )
    fixed_loads = tuple(
        FixedLoad(
            id=ld["id"],
            bus=ld["bus"],
            p=float(ld["p_mw"]) / s_base,
            q=float(ld["q_mvar"]) / s_base,
            load_class=ld["load_class"],
        )
        for ld in doc.get("loads", [])
    )
    grid = GridModel(
        s_base=s_base,
        buses=buses,
        branches=branches,
        flex_units=flex_units,
        fixed_loads=fixed_loads,
        pcc=doc["pcc_branch"],
    )
    findings = validate(grid)
    if findings:
        raise GridValidationError(findings)
    return grid


def save_grid(grid: GridModel, path: str | Path) -> None:
    """Write a grid back to the documented JSON format (physical units)."""
    doc = {
        "s_base_mva": grid.s_base,
        "pcc_branch": grid.pcc,
        "buses": [
            {
                "id": b.id,
                "type": b.bus_type,
                "v_kv": b.v_kv,
                "v_min_pu": b.v_min,
                "v_max_pu": b.v_max,
            }
            for b in grid.buses
        ],
        "branches": [
            {
                "id": b.id,
                "from": b.from_bus,
                "to": b.to_bus,
                "r_pu": b.r,
                "x_pu": b.x,
                "b_pu": b.b,
                "tap": b.tap,
                "s_max_mva": None if math.isinf(b.s_max) else b.s_max * grid.s_base,
            }
            for b in grid.branches
        ],
        "flex_units": [
            {
                "id": u.id,
                "bus": u.bus,
                "p_min_mw": u.p_min * grid.s_base,
                "p_max_mw": u.p_max * grid.s_base,
                "q_min_mvar": u.q_min * grid.s_base,
                "q_max_mvar": u.q_max * grid.s_base,
                "controllable": u.controllable,
                "p_mw": u.p * grid.s_base,
                "q_mvar": u.q * grid.s_base,
            }
            for u in grid.flex_units
        ],
        "loads": [
            {
                "id": ld.id,
                "bus": ld.bus,
                "p_mw": ld.p * grid.s_base,
                "q_mvar": ld.q * grid.s_base,
                "load_class": ld.load_class,
            }
            for ld in grid.fixed_loads
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---- validation ------------------------------------------------------------


def validate(grid: GridModel) -> list[str]:
    """Check every structural invariant; returns one finding per violation."""
    findings: list[str] = []
    if grid.s_base <= 0:
        findings.append(f"s_base must be positive, got {grid.s_base}")

    seen: set[str] = set()
    for bus in grid.buses:
        if bus.id in seen:
            findings.append(f"duplicate bus id {bus.id!r}")
        seen.add(bus.id)
        if bus.bus_type not in (SLACK, PQ):
            findings.append(f"bus {bus.id}: unknown type {bus.bus_type!r}")
        if not bus.v_min < bus.v_max:
            findings.append(f"bus {bus.id}: v_min must be below v_max")

    n_slack = sum(1 for bus in grid.buses if bus.bus_type == SLACK)
    if n_slack == 0:
        findings.append("no slack bus")
    elif n_slack > 1:
        findings.append("multiple slack buses")

    bus_ids = {bus.id for bus in grid.buses}
    seen = set()
    for br in grid.branches:
        if br.id in seen:
            findings.append(f"duplicate branch id {br.id!r}")
        seen.add(br.id)
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                findings.append(f"branch {br.id}: references nonexistent bus {end!r}")
        if br.from_bus == br.to_bus:
            findings.append(f"branch {br.id}: endpoints must differ")
        if br.r < 0:
            findings.append(f"branch {br.id}: negative resistance")
        if br.r == 0 and br.x == 0:
            findings.append(f"branch {br.id}: zero series impedance")
        if br.tap <= 0:
            findings.append(f"branch {br.id}: tap ratio must be positive")
        if br.s_max <= 0:
            findings.append(f"branch {br.id}: s_max must be positive")

    seen = set()
    for fu in grid.flex_units:
        if fu.id in seen:
            findings.append(f"duplicate flex unit id {fu.id!r}")
        seen.add(fu.id)
        if fu.bus not in bus_ids:
            findings.append(f"flex unit {fu.id}: references nonexistent bus {fu.bus!r}")
        if fu.p_min > fu.p_max:
            findings.append(f"flex unit {fu.id}: p_min above p_max")
        if fu.q_min > fu.q_max:
            findings.append(f"flex unit {fu.id}: q_min above q_max")

    seen = set()
    for ld in grid.fixed_loads:
        if ld.id in seen:
            findings.append(f"duplicate load id {ld.id!r}")
        seen.add(ld.id)
        if ld.bus not in bus_ids:
            findings.append(f"load {ld.id}: references nonexistent bus {ld.bus!r}")
        if ld.load_class not in LOAD_CLASSES:
            findings.append(f"load {ld.id}: unknown load class {ld.load_class!r}")

    if grid.pcc not in {br.id for br in grid.branches}:
        findings.append(f"pcc branch {grid.pcc!r} does not exist")

    if not findings and grid.n_bus > 1:
        reached = {grid.buses[0].id}
        frontier = [grid.buses[0].id]
        adjacency: dict[str, list[str]] = {bus.id: [] for bus in grid.buses}
        for br in grid.branches:
            adjacency[br.from_bus].append(br.to_bus)
            adjacency[br.to_bus].append(br.from_bus)
        while frontier:
            nxt = frontier.pop()
            for other in adjacency[nxt]:
                if other not in reached:
                    reached.add(other)
                    frontier.append(other)
        if len(reached) != grid.n_bus:
            missing = sorted(bus_ids - reached)
            findings.append(f"network graph is disconnected (unreachable: {', '.join(missing)})")

    return findings


# ---- control application ----------------------------------------------------


def clip_control(grid: GridModel, u: np.ndarray) -> tuple[np.ndarray, tuple[ClipEvent, ...]]:
    """Clip a control vector to the unit boxes, reporting non-trivial clips."""
    u = np.asarray(u, dtype=float)
    if u.shape != (2 * grid.n_ctrl,):
        raise ValueError(
            f"control vector has length {u.size}, expected {2 * grid.n_ctrl}"
        )
    lower, upper = grid.control_bounds()
    clipped = np.clip(u, lower, upper)
    events = []
    labels = control_labels(grid)
    for i, (raw, lim_lo, lim_hi) in enumerate(zip(u, lower, upper)):
        if raw < lim_lo - CLIP_TOL:
            events.append(ClipEvent(labels[i].split(":", 1)[1], labels[i][0], float(raw), float(lim_lo)))
        elif raw > lim_hi + CLIP_TOL:
            events.append(ClipEvent(labels[i].split(":", 1)[1], labels[i][0], float(raw), float(lim_hi)))
    return clipped, tuple(events)


def apply_control(grid: GridModel, u: np.ndarray) -> GridModel:
    """Return a grid whose controllable-unit set points equal u (clipped to bounds).

    Topology, limits, and fixed loads are untouched.
    """
    clipped, _ = clip_control(grid, u)
    units = list(grid.flex_units)
    j = grid.n_ctrl
    for col, idx in enumerate(grid.ctrl_indices):
        units[idx] = replace(units[idx], p=float(clipped[col]), q=float(clipped[col + j]))
    return replace(grid, flex_units=tuple(units))
