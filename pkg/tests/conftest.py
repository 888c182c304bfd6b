"""Shared fixtures and independent oracles used across the test suite."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from flexsafe.grid_model import GridModel, load_grid
from flexsafe.power_flow import MeasurementVector, SystemState
from flexsafe.qp_solver import QuadraticProgram
from flexsafe.ofo_controller import OFOStep, SegmentRecord, SetPoint, Trajectory

FIXTURES = Path(__file__).parent / "fixtures"
ALL_GRIDS = ("twobus", "ring4", "boxcase", "ring4_tightv", "synth30")

# One line per acceptance criterion, printed after the run so the pytest
# output doubles as an acceptance report (see test_acceptance.passfail).
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance report")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def grid_path(name: str) -> Path:
    return FIXTURES / f"{name}.json"


@pytest.fixture(scope="session")
def twobus() -> GridModel:
    return load_grid(grid_path("twobus"))


@pytest.fixture(scope="session")
def ring4() -> GridModel:
    return load_grid(grid_path("ring4"))


@pytest.fixture(scope="session")
def boxcase() -> GridModel:
    return load_grid(grid_path("boxcase"))


@pytest.fixture(scope="session")
def ring4_tightv() -> GridModel:
    return load_grid(grid_path("ring4_tightv"))


@pytest.fixture(scope="session")
def synth30() -> GridModel:
    return load_grid(grid_path("synth30"))


def twobus_closed_form(p_inj: float, q_inj: float, x: float):
    """Exact two-bus solution, derived by hand rather than by the solver.

    With V1 = 1 at angle 0 and a lossless series reactance x, the injection
    S = P + jQ at bus 2 gives V2 = a + jb with b = P x and
    a^2 - a + P^2 x^2 - Q x = 0 (the root near 1).  Returns (v2, theta2,
    p_pcc, q_pcc) with the PCC flow taken at the slack end.
    """
    b = p_inj * x
    disc = 1.0 - 4.0 * (p_inj**2 * x**2 - q_inj * x)
    if disc < 0:
        raise ValueError("no real power-flow solution for this injection")
    a = 0.5 * (1.0 + math.sqrt(disc))
    v2 = math.hypot(a, b)
    theta2 = math.atan2(b, a)
    return v2, theta2, -b / x, (1.0 - a) / x


def make_state(p: float, q: float) -> SystemState:
    """Minimal converged plant state carrying only a PCC point."""
    return SystemState(
        v=np.ones(1),
        theta=np.zeros(1),
        s_flows=np.zeros(0),
        p_pcc=float(p),
        q_pcc=float(q),
        converged=True,
        iterations=1,
        mismatch=0.0,
    )


def make_trajectory(
    points, aborted: bool = False, converged: bool = True, target=None
) -> Trajectory:
    """Real Trajectory object with planted PCC points, for classifier tests."""
    points = [(float(p), float(q)) for p, q in points]
    if target is None:
        target = points[-1] if points else (0.0, 0.0)
    states = tuple(make_state(p, q) for p, q in points)
    zeros = np.zeros(2)
    y = MeasurementVector(values=np.zeros(3), n_bus=1, n_branch=0)
    steps = tuple(
        OFOStep(
            k=i,
            y=y,
            grad_phi=np.zeros(3),
            w=zeros,
            u=zeros,
            u_next=zeros,
            qp_status="optimal",
            active_count=0,
        )
        for i in range(len(points))
    )
    segments = (
        SegmentRecord(
            setpoint=SetPoint(p_set=target[0], q_set=target[1]),
            start=0,
            stop=len(points),
            converged=converged,
        ),
    )
    return Trajectory(
        steps=steps,
        states=states,
        segments=segments,
        converged=converged and not aborted,
        aborted=aborted,
        abort_reason="planted abort" if aborted else None,
    )


# ---------------------------------------------------------------------------
# Lattice-based QP oracle: instances whose exact optimum lies on the search
# lattice, so a brute-force argmin is an exact independent reference.

LATTICE_N = 2001
LATTICE_LO, LATTICE_HI = -1.0, 1.0
LATTICE_SPACING = (LATTICE_HI - LATTICE_LO) / (LATTICE_N - 1)


@pytest.fixture(scope="session")
def lattice_points() -> np.ndarray:
    axis = np.linspace(LATTICE_LO, LATTICE_HI, LATTICE_N)
    pp, qq = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([pp.ravel(), qq.ravel()])


def make_lattice_instance(
    rng: np.random.Generator, n_active: int
) -> tuple[QuadraticProgram, np.ndarray]:
    """Random 2-d instance with a known-optimal point on the lattice.

    The optimum w* is drawn on the lattice away from the border; n_active
    constraints pass exactly through w* with positive multipliers folded
    into g (so the KKT system holds at w* by construction), and a few
    inactive rows keep slack >= 0.1.  Returns (problem, w*).
    """
    axis = np.linspace(LATTICE_LO, LATTICE_HI, LATTICE_N)
    w_star = np.array(
        [axis[rng.integers(200, LATTICE_N - 200)] for _ in range(2)]
    )
    rows, lower = [], []
    grad_sum = np.zeros(2)
    base_angle = rng.uniform(0, 2 * math.pi)
    for i in range(n_active):
        # spread active normals so they stay linearly independent
        ang = base_angle + i * (math.pi / 2) + rng.uniform(-0.3, 0.3)
        c = np.array([math.cos(ang), math.sin(ang)])
        lam = rng.uniform(0.2, 1.5)
        rows.append(c)
        lower.append(float(c @ w_star))
        grad_sum += lam * c
    for _ in range(rng.integers(2, 4)):
        ang = rng.uniform(0, 2 * math.pi)
        c = np.array([math.cos(ang), math.sin(ang)])
        slack = rng.uniform(0.1, 0.8)
        rows.append(c)
        lower.append(float(c @ w_star) - slack)
    g = -w_star + grad_sum
    a = np.vstack(rows)
    problem = QuadraticProgram(
        g=g,
        a=a,
        lower=np.array(lower),
        upper=np.full(len(lower), np.inf),
    )
    return problem, w_star


def lattice_argmin(problem: QuadraticProgram, points: np.ndarray) -> np.ndarray:
    """Brute-force feasible minimizer of the QP over the shared lattice."""
    feasible = np.ones(points.shape[0], dtype=bool)
    vals = points @ problem.a.T
    feasible &= np.all(vals >= problem.lower - 1e-12, axis=1)
    feasible &= np.all(vals <= problem.upper + 1e-12, axis=1)
    if not np.any(feasible):
        raise ValueError("no feasible lattice point; bad instance")
    diff = points + problem.g
    obj = np.einsum("ij,ij->i", diff, diff)
    obj[~feasible] = np.inf
    return points[int(np.argmin(obj))]
