"""Safety classification of closed-loop trajectory sets against a region.

A trajectory set is Safe when every recorded operating point of every run
stays inside the region (within tolerance) and no run aborted;
ConditionallySafe when every final point is inside but some transient
excursion left the region; Unsafe when a final point lands outside or a run
aborted before producing one.  The missing tail of an aborted run cannot be
checked, so it is treated as outside: the classifier never upgrades a set
on evidence it does not have.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from flexsafe.for_region import FORPolygon, contains_many, polygon_area
from flexsafe.ofo_controller import Trajectory

#: Containment tolerance used when classifying trajectories against a region.
TOL_SAFETY = 1e-3


class SafetyClass(Enum):
    SAFE = "safe"
    CONDITIONALLY_SAFE = "conditionally_safe"
    UNSAFE = "unsafe"


@dataclass(frozen=True)
class TrialFailure:
    """A run that produced no usable trajectory, with the reason kept."""

    trial: int
    reason: str


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Trajectories under one scenario plus provenance of how they were made."""

    trajectories: tuple[Trajectory, ...]
    provenance: dict | None = None
    failures: tuple[TrialFailure, ...] = ()

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True, eq=False)
class PQProjection:
    """A trajectory reduced to its true PCC path."""

    points: np.ndarray
    k_f: int
    converged: bool
    aborted: bool


@dataclass(frozen=True)
class Witness:
    """First piece of evidence for the assigned class (trajectory, step, point)."""

    trajectory: int
    step: int
    point: tuple[float, float] | None
    reason: str


@dataclass(frozen=True, eq=False)
class SafetyVerdict:
    safety_class: SafetyClass
    tol: float
    n_trajectories: int
    n_transient_exits: int
    n_final_exits: int
    n_aborted: int
    witness: Witness | None


@dataclass(frozen=True, eq=False)
class RobustnessReport:
    """Ensemble verdict plus convergence statistics under disturbances."""

    verdict: SafetyVerdict
    n_trials: int
    n_converged: int
    convergence_rate: float
    rate_ci: tuple[float, float]
    coverage: float


def project_trajectory(traj: Trajectory) -> PQProjection:
    """Reduce a closed-loop record to the PCC plane."""
    return PQProjection(
        points=traj.pcc_path(),
        k_f=traj.k_f,
        converged=traj.converged,
        aborted=traj.aborted,
    )


def _as_trajectories(tset) -> tuple[Trajectory, ...]:
    if isinstance(tset, TrajectorySet):
        return tset.trajectories
    return tuple(tset)


def classify(
    tset: TrajectorySet | Sequence[Trajectory],
    polygon: FORPolygon,
    tol: float = TOL_SAFETY,
) -> SafetyVerdict:
    """Assign Safe / ConditionallySafe / Unsafe to a trajectory set.

    Severity order when picking the witness: an aborted run or a final
    point outside the region decides Unsafe; otherwise the first transient
    excursion decides ConditionallySafe.
    """
    trajs = _as_trajectories(tset)
    if not trajs:
        raise ValueError("cannot classify an empty trajectory set")

    n_transient = 0
    n_final = 0
    n_aborted = 0
    unsafe_witness: Witness | None = None
    transient_witness: Witness | None = None

    for ti, traj in enumerate(trajs):
        pts = traj.pcc_path()
        inside = (
            contains_many(polygon, pts, tol)
            if pts.shape[0]
            else np.empty(0, dtype=bool)
        )
        if traj.aborted:
            n_aborted += 1
            if unsafe_witness is None:
                unsafe_witness = Witness(
                    trajectory=ti, step=traj.k_f, point=None, reason="aborted"
                )
        elif inside.size and not inside[-1]:
            n_final += 1
            if unsafe_witness is None:
                unsafe_witness = Witness(
                    trajectory=ti,
                    step=traj.k_f,
                    point=(float(pts[-1, 0]), float(pts[-1, 1])),
                    reason="final_exit",
                )
        transient = np.flatnonzero(~inside[:-1]) if inside.size else np.empty(0, int)
        if transient.size:
            n_transient += 1
            if transient_witness is None:
                k = int(transient[0])
                transient_witness = Witness(
                    trajectory=ti,
                    step=k,
                    point=(float(pts[k, 0]), float(pts[k, 1])),
                    reason="transient_exit",
                )

    if n_aborted or n_final:
        cls, witness = SafetyClass.UNSAFE, unsafe_witness
    elif n_transient:
        cls, witness = SafetyClass.CONDITIONALLY_SAFE, transient_witness
    else:
        cls, witness = SafetyClass.SAFE, None
    return SafetyVerdict(
        safety_class=cls,
        tol=tol,
        n_trajectories=len(trajs),
        n_transient_exits=n_transient,
        n_final_exits=n_final,
        n_aborted=n_aborted,
        witness=witness,
    )


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial rate (default 95% two-sided)."""
    if trials < 1:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def coverage_metric(
    tset: TrajectorySet | Sequence[Trajectory],
    polygon: FORPolygon,
    k: int | None = None,
) -> float:
    """Fraction of the region area spanned by trajectory endpoints at step k.

    Endpoints are taken at min(k, last recorded step) and ordered by the
    angle of each trajectory's final target, so the spanned polygon grows
    outward as the runs progress.  Degenerate endpoint sets span zero area.
    """
    trajs = _as_trajectories(tset)
    if len(trajs) < 3:
        raise ValueError(f"coverage needs at least 3 trajectories, got {len(trajs)}")
    endpoints = []
    order_angles = []
    for traj in trajs:
        pts = traj.pcc_path()
        if pts.shape[0] == 0:
            raise ValueError("coverage is undefined for an empty trajectory")
        idx = pts.shape[0] - 1 if k is None else min(k, pts.shape[0] - 1)
        endpoints.append(pts[idx])
        target = traj.segments[-1].setpoint
        order_angles.append(math.atan2(target.q_set, target.p_set))
    order = np.argsort(order_angles, kind="stable")
    spanned = polygon_area(np.array(endpoints)[order])
    total = polygon.area
    if total <= 0.0:
        return 0.0
    return spanned / total


def robustness_verdict(
    tset: TrajectorySet | Sequence[Trajectory],
    polygon: FORPolygon,
    tol: float = TOL_SAFETY,
) -> RobustnessReport:
    """Classify an ensemble and summarize its convergence statistics."""
    trajs = _as_trajectories(tset)
    verdict = classify(trajs, polygon, tol)
    n_converged = sum(1 for t in trajs if t.converged)
    try:
        coverage = coverage_metric(trajs, polygon)
    except ValueError:
        coverage = float("nan")
    return RobustnessReport(
        verdict=verdict,
        n_trials=len(trajs),
        n_converged=n_converged,
        convergence_rate=n_converged / len(trajs),
        rate_ci=wilson_interval(n_converged, len(trajs)),
        coverage=coverage,
    )


def _witness_dict(w: Witness | None):
    if w is None:
        return None
    return {
        "trajectory": w.trajectory,
        "step": w.step,
        "point": None if w.point is None else [w.point[0], w.point[1]],
        "reason": w.reason,
    }


def _verdict_dict(v: SafetyVerdict) -> dict:
    return {
        "safety_class": v.safety_class.value,
        "tol": v.tol,
        "n_trajectories": v.n_trajectories,
        "n_transient_exits": v.n_transient_exits,
        "n_final_exits": v.n_final_exits,
        "n_aborted": v.n_aborted,
        "witness": _witness_dict(v.witness),
    }


def verdict_payload(obj: SafetyVerdict | RobustnessReport) -> dict:
    """JSON-ready dict for a verdict or a full robustness report."""
    if isinstance(obj, RobustnessReport):
        return {
            "verdict": _verdict_dict(obj.verdict),
            "n_trials": obj.n_trials,
            "n_converged": obj.n_converged,
            "convergence_rate": obj.convergence_rate,
            "rate_ci": [obj.rate_ci[0], obj.rate_ci[1]],
            "coverage": obj.coverage if math.isfinite(obj.coverage) else None,
        }
    return _verdict_dict(obj)


def export_verdict_json(obj: SafetyVerdict | RobustnessReport, path: str | Path) -> None:
    """Write a verdict (or full robustness report) as deterministic JSON."""
    with open(path, "w") as fh:
        json.dump(verdict_payload(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
