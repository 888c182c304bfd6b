"""Feasible operating region of the PCC flow under network constraints.

The region is charted by sweeping rays from the PQ origin: for each angle
the same projected-gradient machinery the dispatch controller uses pushes
the operating point outward along the ray (model in the loop, noise-free)
until network constraints pin it.  The resulting vertices, ordered by
angle, form a star-shaped polygon.

A sampling oracle provides the independent route: random controls drawn in
the box, simulated exactly, and filtered by the true limits.  Their PCC
images must land inside the swept polygon.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flexsafe.grid_model import GridModel, apply_control, clip_control, control_labels
from flexsafe.power_flow import (
    PowerFlowError,
    SystemState,
    limit_violation,
    measure,
    solve_power_flow,
)
from flexsafe.ofo_controller import ControllerConfig, build_step_qp
from flexsafe.qp_solver import solve_qp
from flexsafe.sensitivity import SensitivityMap, compute_sensitivity


class FORError(Exception):
    """Region sweep could not produce a usable polygon."""


@dataclass(frozen=True)
class DirectionSigns:
    """Import/export quadrant of a sweep direction: sign of (cos, sin)."""

    p: int
    q: int

    @classmethod
    def from_angle(cls, theta: float, eps: float = 1e-12) -> "DirectionSigns":
        c, s = math.cos(theta), math.sin(theta)
        return cls(p=0 if abs(c) <= eps else (1 if c > 0 else -1),
                   q=0 if abs(s) <= eps else (1 if s > 0 else -1))


@dataclass(frozen=True)
class SweepConfig:
    """Ray-sweep settings; stages are (kappa, mu) = (outward pull, ray pin)."""

    n_angles: int = 72
    stages: tuple[tuple[float, float], ...] = ((10.0, 50.0), (1.0, 5000.0))
    stage_iterations: int = 400
    gain_scale: float = 0.1
    stall_tol: float = 1e-7
    patience: int = 8

    def __post_init__(self):
        if self.n_angles < 3:
            raise ValueError(f"need at least 3 sweep angles, got {self.n_angles}")
        if not self.stages:
            raise ValueError("at least one (kappa, mu) stage is required")
        if self.stage_iterations < 1 or self.patience < 1:
            raise ValueError("stage_iterations and patience must be positive")
        if self.gain_scale <= 0 or self.stall_tol <= 0:
            raise ValueError("gain_scale and stall_tol must be positive")


@dataclass(frozen=True, eq=False)
class FORPolygon:
    """Star-shaped region boundary: one vertex per surviving sweep angle.

    ``controls`` stores the control vector that realized each vertex so the
    boundary can be re-simulated; ``binding`` names the limits within the
    binding band at each vertex; ``failures`` records dropped angles.
    """

    vertices: np.ndarray
    angles: np.ndarray
    binding: tuple[tuple[str, ...], ...] = ()
    controls: tuple[np.ndarray, ...] = ()
    signs: tuple[DirectionSigns, ...] = ()
    failures: tuple[tuple[float, str], ...] = ()

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        angles = np.asarray(self.angles, dtype=float)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "angles", angles)
        if verts.shape[0] < 3:
            raise FORError(f"a polygon needs at least 3 vertices, got {verts.shape[0]}")
        if angles.shape != (verts.shape[0],):
            raise FORError("one sweep angle per vertex is required")
        if not np.all(np.isfinite(verts)) or not np.all(np.isfinite(angles)):
            raise FORError("polygon data must be finite")
        if np.any(np.diff(angles) <= 0):
            raise FORError("vertices must be ordered by strictly increasing angle")
        for name in ("binding", "controls", "signs"):
            val = getattr(self, name)
            if val and len(val) != verts.shape[0]:
                raise FORError(f"{name} must align with vertices when provided")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def contains(self, point, tol: float = 0.0) -> bool:
        return bool(contains_many(self, np.asarray(point, dtype=float), tol)[0])


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area of a closed polygon given as an (n, 2) vertex loop."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 2)
    if v.shape[0] < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def contains_many(polygon: FORPolygon, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Vectorized point-in-polygon, boundary inclusive within tol.

    Interior membership uses the crossing-number parity; points within tol
    of any edge count as inside regardless of parity, which makes the test
    robust exactly where parity is ill-conditioned.  Non-finite points are
    never contained.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    v = polygon.vertices
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]

    straddles = (y1 > py) != (y2 > py)
    denom = np.where(y2 - y1 == 0.0, 1.0, y2 - y1)
    x_cross = x1 + (py - y1) * (x2 - x1) / denom
    inside = np.sum(straddles & (px < x_cross), axis=1) % 2 == 1

    ex, ey = x2 - x1, y2 - y1
    seg_len2 = np.where(ex**2 + ey**2 == 0.0, 1.0, ex**2 + ey**2)
    t = np.clip(((px - x1) * ex + (py - y1) * ey) / seg_len2, 0.0, 1.0)
    dist2 = (px - (x1 + t * ex)) ** 2 + (py - (y1 + t * ey)) ** 2
    near = np.min(dist2, axis=1) <= tol * tol

    finite = np.all(np.isfinite(pts), axis=1)
    return (inside | near) & finite


def contains(polygon: FORPolygon, point, tol: float = 0.0) -> bool:
    return polygon.contains(point, tol)


def _binding_labels(
    grid: GridModel, u: np.ndarray, state: SystemState, band: float = 1e-3
) -> tuple[str, ...]:
    """Limits within ``band`` of their bound at the given operating point."""
    labels: list[str] = []
    lower, upper = grid.control_bounds()
    for name, ui, lo, hi in zip(control_labels(grid), u, lower, upper):
        if ui - lo <= band:
            labels.append(f"{name}:min")
        if hi - ui <= band:
            labels.append(f"{name}:max")
    for bus, v in zip(grid.buses, state.v):
        if v - bus.v_min <= band:
            labels.append(f"v:{bus.id}:min")
        if bus.v_max - v <= band:
            labels.append(f"v:{bus.id}:max")
    for branch, s in zip(grid.branches, state.s_flows):
        if math.isfinite(branch.s_max) and branch.s_max - s <= band:
            labels.append(f"s:{branch.id}:max")
    return tuple(labels)


def _push_direction(
    grid: GridModel, smap: SensitivityMap, theta: float, config: SweepConfig
) -> tuple[np.ndarray, SystemState]:
    """Drive the PCC flow outward along the ray at ``theta`` until pinned.

    The per-iteration cost -kappa (c . x) + mu (n . x)^2 (c the ray
    direction, n its normal) is minimized with the controller's own
    constrained step; the gain is scaled to the cost curvature seen through
    the PCC rows of the sensitivity map.
    """
    c = np.array([math.cos(theta), math.sin(theta)])
    n_vec = np.array([-math.sin(theta), math.cos(theta)])
    m_pcc = smap.matrix[-2:]
    sigma_n2 = float(np.sum((n_vec @ m_pcc) ** 2))
    sigma_c2 = float(np.sum((c @ m_pcc) ** 2))
    if sigma_n2 + sigma_c2 < 1e-18:
        raise FORError("controls have no effect on the PCC flow; the region is a point")

    u = smap.u0.copy()
    for kappa, mu in config.stages:
        alpha = config.gain_scale / (mu * sigma_n2 + kappa * sigma_c2)
        cfg = ControllerConfig(alpha=alpha, max_iterations=1)
        stall = 0
        for _ in range(config.stage_iterations):
            state = solve_power_flow(apply_control(grid, u))
            if not state.converged:
                raise PowerFlowError(f"power flow diverged during the sweep at u={u}")
            y = measure(state)
            perp = float(n_vec @ [state.p_pcc, state.q_pcc])
            grad_phi = np.zeros(len(y))
            grad_phi[-2] = -kappa * c[0] + 2.0 * mu * perp * n_vec[0]
            grad_phi[-1] = -kappa * c[1] + 2.0 * mu * perp * n_vec[1]
            solution = solve_qp(build_step_qp(u, y, smap, grid, cfg, grad_phi))
            if solution.status != "optimal":
                break
            u_next, _ = clip_control(grid, u + alpha * solution.w)
            delta = float(np.max(np.abs(u_next - u)))
            u = u_next
            if delta < config.stall_tol:
                stall += 1
                if stall >= config.patience:
                    break
            else:
                stall = 0
    state = solve_power_flow(apply_control(grid, u))
    if not state.converged:
        raise PowerFlowError("power flow diverged at the pinned point")
    return u, state


def sweep_for(
    grid: GridModel,
    smap: SensitivityMap | None = None,
    config: SweepConfig | None = None,
) -> FORPolygon:
    """Chart the feasible PCC region by pushing along rays from the origin."""
    if config is None:
        config = SweepConfig()
    if smap is None:
        smap = compute_sensitivity(grid)

    vertices: list[tuple[float, float]] = []
    angles: list[float] = []
    binding: list[tuple[str, ...]] = []
    controls: list[np.ndarray] = []
    signs: list[DirectionSigns] = []
    failures: list[tuple[float, str]] = []

    for i in range(config.n_angles):
        theta = 2.0 * math.pi * i / config.n_angles
        try:
            u, state = _push_direction(grid, smap, theta, config)
        except (PowerFlowError, FORError) as exc:
            failures.append((theta, str(exc)))
            continue
        vertices.append((state.p_pcc, state.q_pcc))
        angles.append(theta)
        binding.append(_binding_labels(grid, u, state))
        controls.append(u)
        signs.append(DirectionSigns.from_angle(theta))

    if len(vertices) < 3:
        raise FORError(
            f"only {len(vertices)} of {config.n_angles} sweep angles succeeded; "
            f"first failure: {failures[0][1] if failures else 'none recorded'}"
        )
    return FORPolygon(
        vertices=np.array(vertices),
        angles=np.array(angles),
        binding=tuple(binding),
        controls=tuple(controls),
        signs=tuple(signs),
        failures=tuple(failures),
    )


@dataclass(frozen=True, eq=False)
class FORSample:
    """Exactly simulated feasible operating points (the oracle route)."""

    points: np.ndarray
    controls: np.ndarray
    n_requested: int
    n_infeasible: int
    n_diverged: int

    @property
    def n_feasible(self) -> int:
        return self.points.shape[0]


def sample_oracle_for(
    grid: GridModel,
    n_samples: int,
    seed,
    feas_tol: float = 1e-9,
) -> FORSample:
    """Draw controls uniformly in the box, keep the ones the true limits admit.

    No linearization is involved: every candidate is a full power-flow
    solve, and feasibility is judged by the exact limit check.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    lower, upper = grid.control_bounds()
    points: list[tuple[float, float]] = []
    kept: list[np.ndarray] = []
    n_infeasible = 0
    n_diverged = 0
    for _ in range(n_samples):
        u = rng.uniform(lower, upper)
        try:
            state = solve_power_flow(apply_control(grid, u))
        except PowerFlowError:
            n_diverged += 1
            continue
        if not state.converged:
            n_diverged += 1
            continue
        if limit_violation(grid, state) > feas_tol:
            n_infeasible += 1
            continue
        points.append((state.p_pcc, state.q_pcc))
        kept.append(u)
    return FORSample(
        points=np.array(points).reshape(-1, 2),
        controls=np.array(kept).reshape(-1, 2 * grid.n_ctrl),
        n_requested=n_samples,
        n_infeasible=n_infeasible,
        n_diverged=n_diverged,
    )


def verify_vertices(grid: GridModel, polygon: FORPolygon) -> tuple[np.ndarray, np.ndarray]:
    """Re-simulate stored vertex controls; return (limit violations, PQ drift).

    A healthy sweep shows violations at numerical zero and drift below the
    re-simulation tolerance; either growing means the polygon no longer
    describes this grid.
    """
    if not polygon.controls:
        raise FORError("polygon carries no vertex controls to verify")
    violations = np.empty(polygon.n_vertices)
    drift = np.empty(polygon.n_vertices)
    for i, u in enumerate(polygon.controls):
        state = solve_power_flow(apply_control(grid, u))
        if not state.converged:
            raise PowerFlowError(f"vertex {i} control no longer solves")
        violations[i] = limit_violation(grid, state)
        drift[i] = math.hypot(
            state.p_pcc - polygon.vertices[i, 0], state.q_pcc - polygon.vertices[i, 1]
        )
    return violations, drift


def export_for_csv(polygon: FORPolygon, path: str | Path) -> None:
    """One vertex per row: sweep angle in degrees, PQ point, binding limits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["theta_deg", "p_pcc", "q_pcc", "binding_constraints"])
        binding = polygon.binding or tuple(() for _ in range(polygon.n_vertices))
        for theta, (p, q), tags in zip(polygon.angles, polygon.vertices, binding):
            writer.writerow(
                [
                    repr(float(math.degrees(theta))),
                    repr(float(p)),
                    repr(float(q)),
                    ";".join(tags),
                ]
            )


def read_for_csv(path: str | Path) -> FORPolygon:
    """Rebuild a polygon from its CSV export (geometry and binding tags only)."""
    angles: list[float] = []
    vertices: list[tuple[float, float]] = []
    binding: list[tuple[str, ...]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["theta_deg", "p_pcc", "q_pcc"]:
            raise FORError(f"{path} is not a region export")
        for row in reader:
            angles.append(math.radians(float(row[0])))
            vertices.append((float(row[1]), float(row[2])))
            binding.append(tuple(t for t in row[3].split(";") if t))
    return FORPolygon(
        vertices=np.array(vertices).reshape(-1, 2),
        angles=np.array(angles),
        binding=tuple(binding),
        signs=tuple(DirectionSigns.from_angle(t) for t in angles),
    )
