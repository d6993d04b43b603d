import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmmplan.errors import ConfigError, DomainError
from snmmplan.experiments import EXP_A_OBSTACLE, exp_a_field
from snmmplan.geometry import (
    Circle,
    ConvexPolygon,
    Ellipse,
    SkewField,
    Workspace,
    build_grid,
    environment_from_dict,
    obstacle_from_dict,
)

CIRCLE_FIELD = SkewField(Workspace(), (Circle((5.0, 5.0), 1.0),))


def test_workspace_rejects_degenerate_bounds():
    with pytest.raises(ConfigError):
        Workspace(0, 0, 0, 1)
    with pytest.raises(ConfigError):
        Workspace(0, 1, 2, 1)


def test_obstacle_validation():
    with pytest.raises(ConfigError):
        Circle((0, 0), 0.0)
    with pytest.raises(ConfigError):
        ConvexPolygon(((0, 0), (1, 0)))
    # clockwise order
    with pytest.raises(ConfigError):
        ConvexPolygon(((0, 0), (0, 1), (1, 1), (1, 0)))
    # non-convex
    with pytest.raises(ConfigError):
        ConvexPolygon(((0, 0), (2, 0), (1, 0.2), (2, 2), (0, 2)))
    with pytest.raises(ConfigError):
        Ellipse((0, 0), (1.0, -1.0))
    with pytest.raises(ConfigError):
        obstacle_from_dict({"type": "hexagon"})


def test_occupancy_examples():
    free = SkewField()
    assert free.occupancy((3.3, 17.0)) == 1
    assert CIRCLE_FIELD.occupancy((5.0, 5.0)) == 0
    assert CIRCLE_FIELD.occupancy((7.0, 5.0)) == 1
    # boundary counts as occupied
    assert CIRCLE_FIELD.occupancy((6.0, 5.0)) == 0


def test_occupancy_outside_workspace_is_domain_error():
    with pytest.raises(DomainError):
        CIRCLE_FIELD.occupancy((25.0, 5.0))
    with pytest.raises(DomainError):
        CIRCLE_FIELD.clearance((-0.1, 5.0))


def test_clearance_examples():
    assert CIRCLE_FIELD.clearance((7.0, 5.0)) == pytest.approx(1.0, abs=1e-12)
    assert CIRCLE_FIELD.clearance((5.0, 5.0)) == pytest.approx(-1.0, abs=1e-12)
    free = SkewField()
    assert free.clearance((1.0, 1.0)) > free.workspace.diagonal


def test_polygon_clearance():
    sq = SkewField(Workspace(), (ConvexPolygon.rectangle(4, 6, 4, 6),))
    assert sq.clearance((7.0, 5.0)) == pytest.approx(1.0)
    assert sq.clearance((7.0, 7.0)) == pytest.approx(math.sqrt(2.0))
    assert sq.clearance((5.0, 5.0)) == pytest.approx(-1.0)
    assert sq.clearance((4.5, 5.0)) == pytest.approx(-0.5)


@pytest.mark.parametrize("rotation", [0.0, 0.4, 1.3])
def test_ellipse_clearance_matches_boundary_sampling(rotation, rng):
    ell = Ellipse((10.0, 10.0), (3.0, 1.2), rotation)
    field = SkewField(Workspace(), (ell,))
    boundary = ell.boundary_points(10_000)
    pts = rng.uniform(5.0, 15.0, size=(200, 2))
    got = field.clearance(pts)
    d = np.min(np.linalg.norm(pts[:, None, :] - boundary[None], axis=-1), axis=1)
    oracle = np.where(ell.contains(pts), -d, d)
    np.testing.assert_allclose(got, oracle, atol=1e-3)
    # the projection is exact, so it never exceeds the sampled distance
    assert np.all(np.abs(got) <= np.abs(oracle) + 1e-12)


def test_signed_distance_gradient_is_unit_and_matches_fd(rng):
    field = SkewField(Workspace(), (Circle((5, 5), 1.0), ConvexPolygon.rectangle(10, 12, 3, 6),
                                    Ellipse((15, 14), (2.0, 1.0), 0.7)))
    pts = rng.uniform(0.5, 19.5, size=(100, 2))
    d, g = field.signed_distance(pts)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-9)
    h = 1e-6
    fd = np.stack([
        (field.signed_distance(pts + [h, 0])[0] - field.signed_distance(pts - [h, 0])[0]) / (2 * h),
        (field.signed_distance(pts + [0, h])[0] - field.signed_distance(pts - [0, h])[0]) / (2 * h),
    ], axis=1)
    np.testing.assert_allclose(g, fd, atol=1e-4)


def test_occupancy_agrees_with_clearance_sign(rng):
    field = SkewField(Workspace(), (Circle((5, 5), 1.0), ConvexPolygon.rectangle(10, 12, 3, 6),
                                    Ellipse((15, 14), (2.0, 1.0), 0.7)))
    pts = rng.uniform(0.0, 20.0, size=(10_000, 2))
    occ = field.occupancy(pts)
    c = field.clearance(pts)
    clear = np.abs(c) >= 1e-9
    np.testing.assert_array_equal(occ[clear] == 1, c[clear] > 0)


def test_grid_counting_and_area():
    g = build_grid(Workspace(), 0.1)
    assert g.size == 40_000
    assert g.shape == (200, 200)
    assert abs(g.integrate(np.ones(g.shape)) - 400.0) <= 0.02 * 400.0
    np.testing.assert_allclose(g.xs[[0, -1]], [0.05, 19.95])


def test_grid_rejects_bad_spacing():
    with pytest.raises(ConfigError):
        build_grid(Workspace(), 0.0)
    with pytest.raises(ConfigError):
        build_grid(Workspace(), 30.0)


def test_grid_row_major_points():
    g = build_grid(Workspace(0, 2, 0, 1), 0.5)
    pts = g.points
    np.testing.assert_allclose(pts[:4, 1], 0.25)
    np.testing.assert_allclose(pts[:4, 0], [0.25, 0.75, 1.25, 1.75])


def test_cached_q_matches_field():
    field = exp_a_field()
    g = build_grid(field=field)
    np.testing.assert_array_equal(g.q.ravel(), field.q(g.points))


def test_exp_a_free_area():
    g = build_grid(field=exp_a_field())
    x0, x1, y0, y1 = EXP_A_OBSTACLE
    analytic = 400.0 - (x1 - x0) * (y1 - y0)
    assert g.integrate(g.q) == pytest.approx(analytic, rel=5e-3)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_linear_polynomials_integrate_exactly(a, b, c):
    g = build_grid(Workspace(), 0.1)
    vals = a + b * g.X + c * g.Y
    # over [0,20]^2: 400 a + 4000 b + 4000 c
    exact = 400 * a + 4000 * b + 4000 * c
    assert g.integrate(vals) == pytest.approx(exact, rel=5e-3, abs=1e-6)


def test_grid_refinement_changes_gaussian_integral_little():
    def integral(dx):
        g = build_grid(Workspace(), dx)
        return g.integrate(np.exp(-0.5 * ((g.X - 9.3) ** 2 / 0.8 + (g.Y - 11.1) ** 2 / 0.5)))

    coarse, fine = integral(0.1), integral(0.05)
    assert abs(coarse - fine) / fine < 1e-2


def test_environment_round_trip():
    field = SkewField(Workspace(0, 10, 0, 8), (Circle((2, 2), 0.5), ConvexPolygon.rectangle(4, 5, 1, 2),
                                              Ellipse((7, 6), (1.0, 0.5), 0.3)))
    spec = field.to_dict()
    spec["grid"] = {"dx": 0.2}
    back, dx, dy = environment_from_dict(spec)
    assert back == field
    assert (dx, dy) == (0.2, 0.2)
