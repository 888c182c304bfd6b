"""Projected-gradient feedback dispatch of flexible units at the PCC.

Each iteration measures the plant, forms the tracking-cost gradient pulled
back through the constant sensitivity map, and solves a small QP for the
update direction w:

    minimize  || w + 2 M^T grad_phi ||^2
    subject to  control box, voltage band and flow limits, all written on
                the predicted next operating point u + alpha w.

The control is advanced by u <- u + alpha w.  Constraints on network
quantities use the latest measurement plus the linearized change, so the
scheme enforces limits through feedback rather than through an exact model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from flexsafe.grid_model import GridModel, apply_control, clip_control, control_labels
from flexsafe.power_flow import (
    MeasurementNoise,
    MeasurementVector,
    PowerFlowError,
    SystemState,
    measure,
    measurement_labels,
    solve_power_flow,
)
from flexsafe.qp_solver import QuadraticProgram, solve_qp


class ControllerError(Exception):
    """Controller setup or calibration failure."""


@dataclass(frozen=True)
class SetPoint:
    """PCC power target in p.u. (import positive)."""

    p_set: float
    q_set: float

    def __post_init__(self):
        if not (math.isfinite(self.p_set) and math.isfinite(self.q_set)):
            raise ValueError("set point must be finite")

    def distance(self, p: float, q: float) -> float:
        return math.hypot(p - self.p_set, q - self.q_set)


@dataclass(frozen=True)
class ControllerConfig:
    """Gain and termination settings for the feedback loop."""

    alpha: float
    max_iterations: int = 500
    convergence_tol: float = 1e-3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")


class NoiseModel(Protocol):
    """Disturbance hooks the closed loop consults once per iteration."""

    def perturb_grid(self, grid: GridModel, k: int) -> GridModel: ...

    def measurement_noise(self, k: int) -> MeasurementNoise | None: ...


@dataclass(frozen=True, eq=False)
class OFOStep:
    """One controller iteration: measurement in, control update out."""

    k: int
    y: MeasurementVector
    grad_phi: np.ndarray
    w: np.ndarray
    u: np.ndarray
    u_next: np.ndarray
    qp_status: str
    active_count: int


@dataclass(frozen=True)
class SegmentRecord:
    """Outcome of tracking one set point; steps [start, stop) belong to it."""

    setpoint: SetPoint
    start: int
    stop: int
    converged: bool

    @property
    def iterations(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Closed-loop record: one true plant state per recorded step."""

    steps: tuple[OFOStep, ...]
    states: tuple[SystemState, ...]
    segments: tuple[SegmentRecord, ...]
    converged: bool
    aborted: bool = False
    abort_reason: str | None = None

    def __post_init__(self):
        if len(self.steps) != len(self.states):
            raise ValueError("steps and states must pair one-to-one")

    @property
    def k_f(self) -> int:
        """Index of the last recorded iteration (-1 for an empty record)."""
        return len(self.steps) - 1

    def pcc_path(self) -> np.ndarray:
        """True (p_pcc, q_pcc) per step, shape (n_steps, 2)."""
        return np.array([[st.p_pcc, st.q_pcc] for st in self.states]).reshape(-1, 2)

    def control_path(self) -> np.ndarray:
        """Applied control per step, shape (n_steps, n_u)."""
        return np.array([s.u for s in self.steps])


def grad_cost(y: MeasurementVector, setpoint: SetPoint) -> np.ndarray:
    """Gradient of the PCC tracking cost with respect to the measurement.

    The cost (p_pcc - p_set)^2 + (q_pcc - q_set)^2 touches only the last two
    measurement rows, so every other entry is zero.
    """
    grad = np.zeros(len(y))
    grad[-2] = 2.0 * (y.p_pcc - setpoint.p_set)
    grad[-1] = 2.0 * (y.q_pcc - setpoint.q_set)
    return grad


def build_step_qp(
    u: np.ndarray,
    y: MeasurementVector,
    smap,
    grid: GridModel,
    config: ControllerConfig,
    grad_phi: np.ndarray,
) -> QuadraticProgram:
    """Assemble the per-step direction QP at measurement y and control u.

    Rows, in order: control box (exact, on the true u), voltage band and
    flow limits (linearized around the measurement).  All rows are written
    on the post-step point u + alpha w.
    """
    m_mat = smap.matrix
    n, m = grid.n_bus, grid.n_branch
    alpha = config.alpha
    lower_u, upper_u = grid.control_bounds()
    a = np.vstack(
        [
            alpha * np.eye(u.size),
            alpha * m_mat[:n],
            alpha * m_mat[n : n + m],
        ]
    )
    lower = np.concatenate([lower_u - u, grid.v_min - y.v, -y.s])
    upper = np.concatenate([upper_u - u, grid.v_max - y.v, grid.s_max - y.s])
    labels = (*control_labels(grid), *measurement_labels(grid)[: n + m])
    return QuadraticProgram(
        g=2.0 * (m_mat.T @ grad_phi), a=a, lower=lower, upper=upper, labels=labels
    )


def _plant_response(
    grid: GridModel, u: np.ndarray, noise: NoiseModel | None, k: int
) -> tuple[SystemState, MeasurementVector]:
    plant = noise.perturb_grid(grid, k) if noise is not None else grid
    state = solve_power_flow(apply_control(plant, u))
    if not state.converged:
        raise PowerFlowError(
            f"plant power flow diverged at iteration {k} (mismatch {state.mismatch:.3e})"
        )
    meas_noise = noise.measurement_noise(k) if noise is not None else None
    return state, measure(state, meas_noise)


def ofo_step(
    grid: GridModel,
    u: np.ndarray,
    smap,
    config: ControllerConfig,
    setpoint: SetPoint,
    k: int = 0,
    noise: NoiseModel | None = None,
) -> tuple[OFOStep, SystemState]:
    """Run one closed-loop iteration against the true plant.

    Returns the step record and the true plant state that produced the
    measurement.  An infeasible QP holds the control (w = 0) rather than
    taking an unreliable direction.
    """
    u = np.asarray(u, dtype=float)
    state, y = _plant_response(grid, u, noise, k)
    grad_phi = grad_cost(y, setpoint)
    solution = solve_qp(build_step_qp(u, y, smap, grid, config, grad_phi))
    if solution.status == "optimal":
        w = solution.w
        u_next, _ = clip_control(grid, u + config.alpha * w)
    else:
        w = np.zeros_like(u)
        u_next = u.copy()
    step = OFOStep(
        k=k,
        y=y,
        grad_phi=grad_phi,
        w=w,
        u=u.copy(),
        u_next=u_next,
        qp_status=solution.status,
        active_count=len(solution.active_set),
    )
    return step, state


def run_schedule(
    grid: GridModel,
    smap,
    schedule: Sequence[SetPoint],
    config: ControllerConfig,
    u0: np.ndarray | None = None,
    noise: NoiseModel | None = None,
) -> Trajectory:
    """Track each set point in turn, carrying the control across segments.

    A segment ends as soon as the true PCC flow is within convergence_tol of
    its target (the update computed at that step is not applied), or after
    max_iterations.  A diverging plant aborts the run; the partial record is
    returned rather than raised so ensemble studies can keep the evidence.
    """
    if not schedule:
        raise ControllerError("schedule must contain at least one set point")
    if u0 is None:
        u = grid.control_vector()
    else:
        u, _ = clip_control(grid, np.asarray(u0, dtype=float))

    steps: list[OFOStep] = []
    states: list[SystemState] = []
    segments: list[SegmentRecord] = []
    k = 0
    aborted = False
    reason = None

    for setpoint in schedule:
        seg_start = k
        seg_converged = False
        for _ in range(config.max_iterations):
            try:
                step, state = ofo_step(grid, u, smap, config, setpoint, k=k, noise=noise)
            except PowerFlowError as exc:
                aborted = True
                reason = str(exc)
                break
            steps.append(step)
            states.append(state)
            k += 1
            if setpoint.distance(state.p_pcc, state.q_pcc) <= config.convergence_tol:
                seg_converged = True
                break
            u = step.u_next
        segments.append(
            SegmentRecord(setpoint=setpoint, start=seg_start, stop=k, converged=seg_converged)
        )
        if aborted:
            break

    converged = (
        not aborted
        and len(segments) == len(schedule)
        and all(s.converged for s in segments)
    )
    return Trajectory(
        steps=tuple(steps),
        states=tuple(states),
        segments=tuple(segments),
        converged=converged,
        aborted=aborted,
        abort_reason=reason,
    )


def export_trajectory_csv(traj: Trajectory, grid: GridModel, path: str | Path) -> None:
    """Per-iteration record: k, applied control, true PCC flow, cost, QP status."""
    owner = {}
    for seg in traj.segments:
        for k in range(seg.start, seg.stop):
            owner[k] = seg.setpoint
    header = ["k", *control_labels(grid), "p_pcc", "q_pcc", "phi", "qp_status", "active_count"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for step, state in zip(traj.steps, traj.states):
            sp = owner[step.k]
            phi = (state.p_pcc - sp.p_set) ** 2 + (state.q_pcc - sp.q_set) ** 2
            writer.writerow(
                [
                    step.k,
                    *[repr(float(x)) for x in step.u],
                    repr(float(state.p_pcc)),
                    repr(float(state.q_pcc)),
                    repr(float(phi)),
                    step.qp_status,
                    step.active_count,
                ]
            )


def calibrate_alpha(
    grid: GridModel,
    smap,
    setpoint: SetPoint,
    lo: float = 1e-3,
    hi: float = 4.0,
    max_iterations: int = 1000,
    convergence_tol: float = 1e-3,
    rounds: int = 24,
) -> float:
    """Largest gain that still converges on the noise-free plant.

    Log-scale bisection on the stability boundary: small gains converge,
    gains past 1/(2 lambda_max) of the PCC quadratic diverge.  Used offline
    to pick per-network defaults.  The iteration budget must be generous
    enough for the lo bracket, whose convergence is the slowest.
    """

    def converges(alpha: float) -> bool:
        cfg = ControllerConfig(
            alpha=alpha, max_iterations=max_iterations, convergence_tol=convergence_tol
        )
        traj = run_schedule(grid, smap, [setpoint], cfg)
        return traj.converged and not traj.aborted

    if not converges(lo):
        raise ControllerError(f"no convergence even at alpha={lo}; check the set point")
    if converges(hi):
        return hi
    good, bad = lo, hi
    for _ in range(rounds):
        mid = math.sqrt(good * bad)
        if converges(mid):
            good = mid
        else:
            bad = mid
    return good
