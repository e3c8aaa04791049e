import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflsde.errors import DomainError, OutsideTube
from reflsde.geometry import (
    DomainSpec,
    as_points,
    boundary_normal,
    cone_contains,
    cutoff,
    disk,
    ellipse,
    inward_normal_extended,
    interval,
    project_to_boundary,
    reflect_across_boundary,
    sample_cone,
    signed_distance,
    smoothstep5,
    uniform_sphere_radius,
)

coord = st.floats(-3.0, 3.0, allow_nan=False)
DOMAINS = [disk(1.0), disk(0.5), ellipse(2.0, 1.0), ellipse(1.5, 1.5)]


def test_presets_reject_bad_params():
    with pytest.raises(DomainError):
        interval(1.0, 0.0)
    with pytest.raises(DomainError):
        disk(-1.0)
    with pytest.raises(DomainError):
        ellipse(1.0, 2.0)
    with pytest.raises(DomainError):
        DomainSpec("square", (1.0,))


def test_interval_distance_and_normals():
    dom = interval(0.0, 1.0)
    x = np.array([[0.25], [0.9], [-0.1], [1.2]])
    np.testing.assert_allclose(signed_distance(dom, x), [0.25, 0.1, -0.1, -0.2])
    np.testing.assert_allclose(project_to_boundary(dom, x)[:, 0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(boundary_normal(dom, np.array([[0.0], [1.0]]))[:, 0], [1.0, -1.0])


def test_disk_centre_tie_is_deterministic():
    dom = disk(2.0)
    np.testing.assert_allclose(project_to_boundary(dom, np.zeros(2)), [2.0, 0.0])


def test_uniform_sphere_radius_values():
    assert uniform_sphere_radius(interval(0.0, 1.0)) == 0.5
    assert uniform_sphere_radius(disk(3.0)) == 3.0
    assert uniform_sphere_radius(ellipse(2.0, 1.0)) == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(DOMAINS), coord, coord)
def test_projection_lands_on_boundary_at_distance(dom, a, b):
    p = np.array([[a, b]])
    q = project_to_boundary(dom, p)
    assert abs(signed_distance(dom, q)[0]) < 1e-9
    if np.linalg.norm(p) > 1e-6:
        assert np.linalg.norm(p - q) == pytest.approx(abs(signed_distance(dom, p)[0]), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(DOMAINS), coord, coord)
def test_projection_is_idempotent(dom, a, b):
    q = project_to_boundary(dom, np.array([[a, b]]))
    np.testing.assert_allclose(project_to_boundary(dom, q), q, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(DOMAINS), st.floats(0.0, 2 * np.pi))
def test_normals_unit_and_inward(dom, ang):
    q = project_to_boundary(dom, np.array([[np.cos(ang), np.sin(ang)]]))
    n = boundary_normal(dom, q)
    assert np.linalg.norm(n) == pytest.approx(1.0)
    assert signed_distance(dom, q + 1e-4 * n)[0] > 0
    assert signed_distance(dom, q - 1e-4 * n)[0] < 0


def test_ellipse_normal_matches_distance_gradient(rng):
    dom = ellipse(2.0, 1.0)
    q = dom.sample_boundary(rng, 50)
    n = boundary_normal(dom, q)
    h = 1e-6
    g = np.column_stack([
        (signed_distance(dom, q + [h, 0]) - signed_distance(dom, q - [h, 0])) / (2 * h),
        (signed_distance(dom, q + [0, h]) - signed_distance(dom, q - [0, h])) / (2 * h),
    ])
    np.testing.assert_allclose(g, n, atol=1e-5)


def test_extended_normal_tapers(rng):
    dom = disk(1.0)
    near = np.array([[0.9, 0.0]])
    far = np.array([[0.0, 0.0]])
    np.testing.assert_allclose(inward_normal_extended(dom, near), [[-1.0, 0.0]])
    np.testing.assert_allclose(inward_normal_extended(dom, far), [[0.0, 0.0]])


def test_reflection_is_involution_and_guarded(rng):
    dom = disk(1.0)
    x = dom.sample_tube(rng, 200, 0.3)
    np.testing.assert_allclose(reflect_across_boundary(dom, reflect_across_boundary(dom, x)), x, atol=1e-12)
    with pytest.raises(OutsideTube):
        reflect_across_boundary(dom, np.array([[0.0, 0.0]]))


def test_samplers_respect_regions(rng):
    dom = ellipse(2.0, 1.0)
    assert np.all(signed_distance(dom, dom.sample_inside(rng, 300, margin=0.1)) > 0.1)
    sd = signed_distance(dom, dom.sample_tube(rng, 300, 0.2))
    assert np.all((sd > -0.2) & (sd < 0.2))
    assert np.all(np.abs(signed_distance(dom, dom.sample_boundary(rng, 100))) < 1e-9)


def test_cone_sampler_stays_inside(rng):
    apex = np.zeros((500, 2))
    axis = np.tile([0.0, 1.0], (500, 1))
    y = sample_cone(rng, apex, axis, 0.3, 0.5, 500)
    assert np.all(cone_contains(apex, axis, 0.3, 0.5, y))


def test_smoothstep_and_cutoff_ends():
    np.testing.assert_allclose(smoothstep5(np.array([0.0, 0.5, 1.0])), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(cutoff(np.array([0.1, 2.0]), 0.5, 1.0), [1.0, 0.0])


def test_as_points_shapes():
    p, single = as_points([0.1, 0.2], 2)
    assert p.shape == (1, 2) and single
    p, single = as_points(np.zeros((5, 2)), 2)
    assert p.shape == (5, 2) and not single
