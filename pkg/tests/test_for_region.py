"""Feasible-operating-region sweep, containment geometry, sampling oracle, CSV."""

import math

import numpy as np
import pytest

from flexsafe.for_region import (
    DirectionSigns,
    FORError,
    FORPolygon,
    SweepConfig,
    contains,
    contains_many,
    export_for_csv,
    polygon_area,
    read_for_csv,
    sample_oracle_for,
    sweep_for,
    verify_vertices,
)
from flexsafe.sensitivity import compute_sensitivity


@pytest.fixture(scope="module")
def diamond():
    return FORPolygon(
        vertices=np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]),
        angles=np.array([0.0, np.pi / 2, np.pi, 3 * np.pi / 2]),
    )


@pytest.fixture(scope="module")
def boxcase_poly(boxcase):
    return sweep_for(boxcase, config=SweepConfig(n_angles=8))


def test_polygon_area_known_shapes():
    square = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
    assert polygon_area(square) == 4.0
    assert polygon_area(square[::-1]) == 4.0  # orientation-independent
    triangle = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    assert polygon_area(triangle) == 6.0


def test_containment_boundary_inclusive(diamond):
    pts = np.array(
        [
            [0.0, 0.0],  # interior
            [1.0, 0.0],  # vertex
            [0.5, 0.5],  # mid-edge
            [0.5 + 1e-9, 0.5 + 1e-9],  # just outside
            [2.0, 2.0],  # far outside
        ]
    )
    inside = contains_many(diamond, pts, tol=0.0)
    assert inside.tolist() == [True, True, True, False, False]
    dilated = contains_many(diamond, pts, tol=0.1)
    assert dilated.tolist() == [True, True, True, True, False]
    assert contains(diamond, (0.2, -0.1))
    assert diamond.contains((0.2, -0.1))


def test_containment_rejects_non_finite(diamond):
    pts = np.array([[np.nan, 0.0], [np.inf, 0.0], [0.0, -np.inf]])
    assert not contains_many(diamond, pts, tol=10.0).any()


def test_polygon_validation():
    two = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(FORError):
        FORPolygon(vertices=two, angles=np.array([0.0, 1.0]))
    square = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(FORError):  # angles must strictly increase
        FORPolygon(vertices=square, angles=np.array([0.0, 1.0, 1.0, 2.0]))
    with pytest.raises(FORError):  # non-finite vertex
        FORPolygon(
            vertices=np.array([[np.nan, 0.0], [0.0, 1.0], [-1.0, 0.0]]),
            angles=np.array([0.0, 1.0, 2.0]),
        )
    with pytest.raises(FORError):  # optional fields must align with vertices
        FORPolygon(
            vertices=square,
            angles=np.array([0.0, 1.0, 2.0, 3.0]),
            binding=(("p:u1:max",),),
        )


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(n_angles=2)
    with pytest.raises(ValueError):
        SweepConfig(gain_scale=0.0)


def test_box_limits_recovered(boxcase_poly):
    """With no loads and a stiff tie, the region is the unit capability box."""
    v = boxcase_poly.vertices
    assert v[:, 0].max() == pytest.approx(0.4, abs=1e-6)
    assert v[:, 0].min() == pytest.approx(-0.4, abs=1e-6)
    # Reactive import also carries the tie's I^2 x loss, so the q extreme
    # sits slightly above the 0.3 pu unit limit; the export side slightly below.
    assert 0.3 - 1e-6 <= v[:, 1].max() <= 0.305
    assert -0.3 <= v[:, 1].min() <= -0.295
    assert boxcase_poly.area == pytest.approx(0.42, abs=0.01)


def test_vertices_lie_on_their_rays(boxcase_poly):
    for (p, q), theta in zip(boxcase_poly.vertices, boxcase_poly.angles):
        err = (math.atan2(q, p) - theta + math.pi) % (2 * math.pi) - math.pi
        assert abs(err) < 0.01


def test_binding_labels_name_real_limits(boxcase_poly, boxcase):
    lower, upper = boxcase.control_bounds()
    for tags, u in zip(boxcase_poly.binding, boxcase_poly.controls):
        assert tags  # a pushed-to-the-edge point must bind something
        for tag in tags:
            kind = tag.split(":")[0]
            assert kind in ("p", "q", "v", "s")
    # The pure-import vertex binds the unit's active-power floor.
    assert "p:u1:min" in boxcase_poly.binding[0]


def test_sweep_vertices_replay_on_true_plant(boxcase, boxcase_poly):
    violations, drift = verify_vertices(boxcase, boxcase_poly)
    assert violations.shape == (boxcase_poly.n_vertices,)
    assert np.max(violations) <= 1e-9
    assert np.max(drift) <= 1e-9


def test_ring4_sweep_mixed_binding(ring4):
    smap = compute_sensitivity(ring4)
    poly = sweep_for(ring4, smap=smap, config=SweepConfig(n_angles=12))
    assert poly.n_vertices == 12
    assert polygon_area(poly.vertices) > 0.1
    kinds = {tag.split(":")[0] for tags in poly.binding for tag in tags}
    assert "p" in kinds or "q" in kinds
    violations, drift = verify_vertices(ring4, poly)
    assert np.max(violations) <= 1e-6
    assert np.max(drift) <= 1e-6


def test_oracle_counts_and_determinism(boxcase):
    sample = sample_oracle_for(boxcase, 500, seed=9)
    assert sample.n_requested == 500
    assert sample.n_feasible == len(sample.points)
    assert sample.n_feasible + sample.n_infeasible + sample.n_diverged == 500
    assert sample.n_feasible > 0
    again = sample_oracle_for(boxcase, 500, seed=9)
    assert np.array_equal(sample.points, again.points)
    other = sample_oracle_for(boxcase, 500, seed=10)
    assert not np.array_equal(sample.points, other.points)


def test_oracle_points_inside_swept_region(boxcase, boxcase_poly):
    """Feasible plant states stay within the (tolerance-dilated) sweep polygon.

    8 rays cut the box corners, so allow the corner-chord error plus the
    safety tolerance when checking containment.
    """
    sample = sample_oracle_for(boxcase, 400, seed=3)
    chord_slack = 0.09  # octagon-vs-rectangle corner gap for this box
    inside = contains_many(boxcase_poly, sample.points, tol=chord_slack)
    assert inside.mean() >= 0.99


def test_csv_round_trip(ring4, tmp_path):
    smap = compute_sensitivity(ring4)
    poly = sweep_for(ring4, smap=smap, config=SweepConfig(n_angles=8))
    path = tmp_path / "region.csv"
    export_for_csv(poly, path)
    back = read_for_csv(path)
    assert np.array_equal(back.vertices, poly.vertices)
    assert np.array_equal(back.angles, poly.angles)
    assert back.binding == poly.binding
    assert back.signs == tuple(DirectionSigns.from_angle(t) for t in poly.angles)
    assert back.area == pytest.approx(poly.area)


def test_read_rejects_foreign_csv(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FORError):
        read_for_csv(path)
