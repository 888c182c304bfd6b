"""AC power-flow solver against a hand-derived two-bus solution and physics checks."""

from dataclasses import replace

import numpy as np
import pytest

from flexsafe.grid_model import apply_control, load_grid
from flexsafe.power_flow import (
    MeasurementNoise,
    PowerFlowError,
    branch_flows,
    limit_violation,
    measure,
    measurement_labels,
    nodal_residuals,
    solve_power_flow,
    steady_state_map,
)

from conftest import ALL_GRIDS, grid_path, twobus_closed_form


def test_two_bus_matches_closed_form(twobus):
    state = solve_power_flow(twobus)
    # Net injection at bus 2: the 3 MW / 1 Mvar load on a 10 MVA base.
    v2, theta2, p_pcc, q_pcc = twobus_closed_form(-0.3, -0.1, 0.1)
    assert state.converged
    assert abs(state.v[1] - v2) < 1e-8
    assert abs(state.theta[1] - theta2) < 1e-8
    assert abs(state.p_pcc - p_pcc) < 1e-8
    assert abs(state.q_pcc - q_pcc) < 1e-8


def test_two_bus_closed_form_tracks_control(twobus):
    u = np.array([0.2, -0.1])
    state = solve_power_flow(apply_control(twobus, u))
    v2, _, p_pcc, q_pcc = twobus_closed_form(0.2 - 0.3, -0.1 - 0.1, 0.1)
    assert abs(state.v[1] - v2) < 1e-8
    assert abs(state.p_pcc - p_pcc) < 1e-8
    assert abs(state.q_pcc - q_pcc) < 1e-8


@pytest.mark.parametrize("name", ALL_GRIDS)
def test_nodal_residuals_below_tolerance(name):
    grid = load_grid(grid_path(name))
    state = solve_power_flow(grid)
    assert state.converged
    assert state.mismatch < 1e-8
    assert np.max(np.abs(nodal_residuals(grid, state))) < 1e-8


def test_flat_unloaded_case_converges_immediately(boxcase):
    state = solve_power_flow(boxcase)
    assert state.iterations == 0
    assert np.allclose(state.v, 1.0)
    assert abs(state.p_pcc) < 1e-12 and abs(state.q_pcc) < 1e-12


def test_lossless_branch_power_balance(twobus):
    state = solve_power_flow(twobus)
    voltage = state.v * np.exp(1j * state.theta)
    s_from, s_to = branch_flows(twobus, voltage)
    # r = 0: active power in equals active power out.
    assert abs(s_from[0].real + s_to[0].real) < 1e-10
    assert state.p_pcc == pytest.approx(s_from[0].real, abs=1e-12)


def test_flow_magnitude_uses_more_loaded_end(ring4):
    state = solve_power_flow(ring4)
    voltage = state.v * np.exp(1j * state.theta)
    s_from, s_to = branch_flows(ring4, voltage)
    expected = np.maximum(np.abs(s_from), np.abs(s_to))
    assert np.allclose(state.s_flows, expected, atol=1e-12)


def test_measurement_vector_layout(ring4):
    state = solve_power_flow(ring4)
    m = measure(state)
    n, b = ring4.n_bus, len(ring4.branches)
    assert m.values.shape == (n + b + 2,)
    assert np.array_equal(m.v, state.v)
    assert np.array_equal(m.s, state.s_flows)
    assert m.p_pcc == state.p_pcc and m.q_pcc == state.q_pcc
    labels = measurement_labels(ring4)
    assert len(labels) == len(m.values)
    assert labels[0].startswith("v:") and labels[-2:] == ("p_pcc", "q_pcc")


def test_measurement_noise_envelope_and_determinism(ring4):
    state = solve_power_flow(ring4)
    clean = measure(state).values
    noise = MeasurementNoise(-0.02, 0.02, np.random.default_rng(7))
    noisy = measure(state, noise).values
    ratio = noisy / clean
    assert np.all(ratio >= 0.98 - 1e-12) and np.all(ratio <= 1.02 + 1e-12)
    assert not np.allclose(noisy, clean)
    # Same seed reproduces the same draw.
    again = measure(state, MeasurementNoise(-0.02, 0.02, np.random.default_rng(7))).values
    assert np.array_equal(noisy, again)


def test_steady_state_map_matches_solve(ring4):
    u = np.array([0.3, -0.2, 0.1, 0.05])
    m = steady_state_map(ring4, u)
    state = solve_power_flow(apply_control(ring4, u))
    assert np.allclose(m.values, measure(state).values, atol=1e-12)


def test_unsolvable_injection_flags_non_convergence(twobus):
    # Drawing 3.1 pu of reactive power across a 0.1 pu reactance has no
    # real solution (the closed-form discriminant goes negative).
    with pytest.raises(ValueError):
        twobus_closed_form(-0.3, -3.1, 0.1)
    overload = replace(twobus.fixed_loads[0], q=3.1)
    grid = replace(twobus, fixed_loads=(overload,))
    state = solve_power_flow(grid, max_iter=25)
    assert not state.converged
    assert state.iterations == 25
    # The convenience map turns the flag into an exception.
    with pytest.raises(PowerFlowError):
        steady_state_map(grid, np.zeros(2), max_iter=25)


def test_max_iter_enforced(ring4):
    state = solve_power_flow(ring4, max_iter=1)
    assert not state.converged and state.iterations == 1
    with pytest.raises(PowerFlowError):
        steady_state_map(ring4, np.zeros(4), max_iter=1)


def test_warm_start_accepts_previous_state(ring4):
    cold = solve_power_flow(ring4)
    warm = solve_power_flow(ring4, initial=cold)
    assert warm.converged
    assert warm.iterations <= cold.iterations
    assert np.allclose(warm.v, cold.v, atol=1e-10)


def test_limit_violation_sign(ring4, ring4_tightv):
    state = solve_power_flow(ring4)
    assert limit_violation(ring4, state) <= 0.0
    # Push the tight-voltage variant past its ceiling.
    grid = apply_control(ring4_tightv, np.array([0.0, 0.0, 0.6, 0.6]))
    pushed = solve_power_flow(grid)
    assert limit_violation(ring4_tightv, pushed) > 0.0
