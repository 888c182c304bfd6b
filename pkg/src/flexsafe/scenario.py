"""Scenario files: one JSON document describing a complete study.

A scenario bundles the grid reference, controller settings, dispatch
schedule, noise channels, sweep and Monte Carlo parameters.  The loader
resolves the grid path relative to the scenario file and stamps the raw
document with a content hash so every artifact can name the exact
configuration that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flexsafe.grid_model import GridError, GridModel, load_grid
from flexsafe.ofo_controller import ControllerConfig, SetPoint
from flexsafe.for_region import SweepConfig
from flexsafe.uncertainty_mc import NoiseConfig

#: Schedule directive: expand to one single-target run per region vertex.
HULL_VERTICES = "hull-vertices"

_TOP_KEYS = {"grid", "controller", "schedule", "u0", "noise", "for", "mc", "out_dir"}


class ScenarioError(Exception):
    """Scenario file missing, malformed, or inconsistent with its grid."""


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Parsed scenario; ``schedule`` is either explicit targets or HULL_VERTICES."""

    source: Path
    grid_path: Path
    grid: GridModel
    controller: ControllerConfig
    schedule: tuple[SetPoint, ...] | str
    u0: np.ndarray | None
    noise: NoiseConfig | None
    sweep: SweepConfig
    oracle_samples: int
    mc_trials: int
    histogram_bins: int
    histogram_iterations: tuple[int, ...]
    out_dir: Path | None
    config_hash: str


def config_hash(document: dict) -> str:
    """sha256 of the canonical JSON form of the raw scenario document."""
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _as_mapping(doc: dict, key: str) -> dict:
    val = doc.get(key, {})
    if not isinstance(val, dict):
        raise ScenarioError(f"'{key}' must be an object, got {type(val).__name__}")
    return val


def _parse_schedule(raw) -> tuple[SetPoint, ...] | str:
    if raw == HULL_VERTICES:
        return HULL_VERTICES
    if not isinstance(raw, list) or not raw:
        raise ScenarioError(
            f"'schedule' must be \"{HULL_VERTICES}\" or a non-empty list of [p, q] pairs"
        )
    targets = []
    for i, item in enumerate(raw):
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise ScenarioError(f"schedule entry {i} is not a [p, q] pair: {item!r}")
        try:
            targets.append(SetPoint(p_set=float(item[0]), q_set=float(item[1])))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"schedule entry {i}: {exc}") from exc
    return tuple(targets)


def _parse_noise(block: dict | None) -> NoiseConfig | None:
    if block is None:
        return None
    if "seed" not in block:
        raise ScenarioError("'noise' block requires a 'seed'")
    unknown = set(block) - {"seed", "load_sigma", "load_cov", "meas_bounds", "sens_bounds"}
    if unknown:
        raise ScenarioError(f"unknown noise keys: {sorted(unknown)}")
    try:
        return NoiseConfig(
            seed=int(block["seed"]),
            load_sigma=block.get("load_sigma"),
            load_cov=(
                np.asarray(block["load_cov"], dtype=float)
                if block.get("load_cov") is not None
                else None
            ),
            meas_bounds=(
                tuple(block["meas_bounds"]) if block.get("meas_bounds") else None
            ),
            sens_bounds=(
                tuple(block["sens_bounds"]) if block.get("sens_bounds") else None
            ),
        )
    except ValueError as exc:
        raise ScenarioError(f"noise block: {exc}") from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Parse and validate a scenario file, loading its grid."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("grid", "controller", "schedule"):
        if key not in doc:
            raise ScenarioError(f"{path}: missing required key '{key}'")

    grid_path = (path.parent / doc["grid"]).resolve()
    try:
        grid = load_grid(grid_path)
    except GridError as exc:
        raise ScenarioError(f"grid {grid_path}: {exc}") from exc

    ctrl = _as_mapping(doc, "controller")
    unknown = set(ctrl) - {"alpha", "max_iterations", "convergence_tol"}
    if unknown:
        raise ScenarioError(f"unknown controller keys: {sorted(unknown)}")
    if "alpha" not in ctrl:
        raise ScenarioError("'controller' block requires 'alpha'")
    try:
        controller = ControllerConfig(
            alpha=float(ctrl["alpha"]),
            max_iterations=int(ctrl.get("max_iterations", 500)),
            convergence_tol=float(ctrl.get("convergence_tol", 1e-3)),
        )
    except ValueError as exc:
        raise ScenarioError(f"controller block: {exc}") from exc

    schedule = _parse_schedule(doc["schedule"])

    u0 = None
    if doc.get("u0") is not None:
        u0 = np.asarray(doc["u0"], dtype=float)
        if u0.shape != (2 * grid.n_ctrl,):
            raise ScenarioError(
                f"u0 has {u0.size} entries; the grid has {2 * grid.n_ctrl} controls"
            )

    noise = _parse_noise(doc.get("noise"))

    for_block = _as_mapping(doc, "for")
    unknown = set(for_block) - {
        "n_angles",
        "oracle_samples",
        "stage_iterations",
        "gain_scale",
        "stall_tol",
        "patience",
    }
    if unknown:
        raise ScenarioError(f"unknown for keys: {sorted(unknown)}")
    try:
        sweep = SweepConfig(
            n_angles=int(for_block.get("n_angles", 72)),
            stage_iterations=int(for_block.get("stage_iterations", 400)),
            gain_scale=float(for_block.get("gain_scale", 0.1)),
            stall_tol=float(for_block.get("stall_tol", 1e-7)),
            patience=int(for_block.get("patience", 8)),
        )
    except ValueError as exc:
        raise ScenarioError(f"for block: {exc}") from exc
    oracle_samples = int(for_block.get("oracle_samples", 5000))
    if oracle_samples < 1:
        raise ScenarioError("oracle_samples must be positive")

    mc_block = _as_mapping(doc, "mc")
    unknown = set(mc_block) - {"n_trials", "histogram_bins", "histogram_iterations"}
    if unknown:
        raise ScenarioError(f"unknown mc keys: {sorted(unknown)}")
    mc_trials = int(mc_block.get("n_trials", 100))
    histogram_bins = int(mc_block.get("histogram_bins", 40))
    if mc_trials < 1 or histogram_bins < 1:
        raise ScenarioError("mc n_trials and histogram_bins must be positive")
    iterations = tuple(int(k) for k in mc_block.get("histogram_iterations", ()))
    if any(k < 0 for k in iterations):
        raise ScenarioError("histogram_iterations must be non-negative")

    out_dir = Path(doc["out_dir"]) if doc.get("out_dir") else None
    if out_dir is not None and not out_dir.is_absolute():
        out_dir = (path.parent / out_dir).resolve()

    return ScenarioConfig(
        source=path,
        grid_path=grid_path,
        grid=grid,
        controller=controller,
        schedule=schedule,
        u0=u0,
        noise=noise,
        sweep=sweep,
        oracle_samples=oracle_samples,
        mc_trials=mc_trials,
        histogram_bins=histogram_bins,
        histogram_iterations=iterations,
        out_dir=out_dir,
        config_hash=config_hash(doc),
    )
