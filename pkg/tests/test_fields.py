import numpy as np
import pytest

from reflsde.errors import DomainError
from reflsde.fields import (
    DRIFT_PRESETS,
    MollifierKernel,
    SpaceGrid,
    SpaceTimeVectorField,
    load_field,
    make_drift,
    mollify,
    norm_Lp_spacetime,
    save_field,
    spacetime_quadrature,
)
from reflsde.geometry import disk, ellipse, interval


def _segment_area(lo, hi):
    """Area of {lo < x1 < hi} inside the unit disk from the antiderivative of 2 sqrt(1 - x^2)."""
    F = lambda x: x * np.sqrt(1 - x * x) + np.arcsin(x)  # noqa: E731
    return F(hi) - F(lo)


def test_presets_evaluate_and_vanish_outside(rng):
    dom = disk(1.0)
    for preset in DRIFT_PRESETS:
        b = make_drift(dom, preset, bound=2.0)
        inside = dom.sample_inside(rng, 100)
        assert np.all(np.linalg.norm(b(0.0, inside), axis=1) <= b.sup_norm + 1e-12)
        assert np.all(b(0.0, np.array([[1.5, 0.0], [0.0, -2.0]])) == 0.0)


def test_sign1d_values():
    b = make_drift(interval(0.0, 1.0), "sign1d", bound=2.0)
    np.testing.assert_allclose(b(0.0, np.array([[0.2], [0.8]]))[:, 0], [-2.0, 2.0])
    assert b.discontinuous


def test_planar_presets_reject_interval():
    with pytest.raises(DomainError):
        make_drift(interval(), "checkerboard2d")
    with pytest.raises(DomainError):
        make_drift(interval(), "radial_jump")
    with pytest.raises(DomainError):
        make_drift(disk(), "no-such-preset")


def test_kernel_rule_is_normalised():
    k = MollifierKernel()
    for dim in (1, 2):
        pts, w = k.rule(16, dim)
        assert w.sum() == pytest.approx(1.0)
        # symmetric kernel: first moment vanishes
        np.testing.assert_allclose(w @ pts, 0.0, atol=1e-14)


def test_mollified_constant_is_unchanged_in_the_interior(rng):
    dom = disk(1.0)
    b = make_drift(dom, "constant", vector=[0.3, -0.4])
    bn = mollify(b, 4)
    x = dom.sample_inside(rng, 50, margin=0.2)
    np.testing.assert_allclose(bn(0.0, x), b(0.0, x), atol=1e-12)
    assert not bn.discontinuous


def test_mollified_sign_is_smooth_and_bounded():
    b = make_drift(interval(0.0, 1.0), "sign1d", bound=1.0)
    # the rule integrates across the jump, so it converges only like 1 / m
    bn = mollify(b, 5, tol=1e-2, m_max=512)
    x = np.linspace(0.3, 0.7, 101).reshape(-1, 1)
    v = bn(0.0, x)[:, 0]
    assert np.all(np.abs(v) <= 1.0 + 1e-9)
    assert np.all(np.diff(v) >= -1e-9)
    assert v[50] == pytest.approx(0.0, abs=1e-9)


def test_unit_disk_area_from_quadrature():
    tn, tw, pts, xw = spacetime_quadrature(disk(1.0), 0.0, 2.0, m=16)
    assert tw.sum() == pytest.approx(2.0)
    assert xw.sum() == pytest.approx(np.pi, rel=1e-12)


def test_ellipse_area_from_quadrature():
    _, _, _, xw = spacetime_quadrature(ellipse(2.0, 1.0), 0.0, 1.0, m=16)
    assert xw.sum() == pytest.approx(2.0 * np.pi, rel=1e-12)


@pytest.mark.parametrize("c,w", [(0.0, 0.1), (0.5, 0.05), (-0.9, 0.025)])
def test_slab_indicator_norm_matches_segment_area(c, w):
    lo, hi = c - w / 2, c + w / 2
    f = lambda t, x: ((x[:, 0] >= lo) & (x[:, 0] < hi)).astype(float)  # noqa: E731
    got = norm_Lp_spacetime(f, 3, disk(1.0), 0.0, 1.0, m=16, x_breaks=(lo, hi))
    assert got == pytest.approx(_segment_area(lo, hi) ** (1 / 3), rel=1e-10)


def test_constant_norm_on_interval():
    got = norm_Lp_spacetime(lambda t, x: np.full(len(x), 2.0), 2, interval(0.0, 3.0), 0.0, 1.0)
    assert got == pytest.approx(2.0 * np.sqrt(3.0))


def test_field_reproduces_translations_and_roundtrips(tmp_path, rng):
    dom = disk(1.0)
    grid = SpaceGrid(dom, 0.125, 32)
    nodes = grid.nodes().reshape(grid.shape + (2,))
    c = np.array([0.3, -0.2])
    times = np.array([0.0, 0.5, 1.0])
    values = np.stack([nodes + (1.0 - t) * c for t in times])
    f = SpaceTimeVectorField(times, grid, values)
    x = dom.sample_inside(rng, 50)
    np.testing.assert_allclose(f(0.25, x), x + 0.75 * c, atol=1e-12)
    np.testing.assert_allclose(f.jacobian(0.25, x), np.broadcast_to(np.eye(2), (50, 2, 2)), atol=1e-8)
    path = save_field(f, tmp_path / "u.bin")
    g = load_field(path)
    np.testing.assert_array_equal(g.values, f.values)
    np.testing.assert_array_equal(g.times, f.times)
    np.testing.assert_allclose(g(0.25, x), f(0.25, x))


def test_interval_field_reproduces_affine_data(rng):
    grid = SpaceGrid(interval(0.0, 1.0), 0.0625)
    nodes = grid.nodes().reshape(grid.shape + (1,))
    times = np.array([0.0, 1.0])
    f = SpaceTimeVectorField(times, grid, np.stack([1.5 * nodes - t for t in times]))
    x = rng.uniform(0, 1, (40, 1))
    np.testing.assert_allclose(f(0.5, x), 1.5 * x - 0.5, atol=1e-12)


def test_grid_rejects_incommensurate_h():
    with pytest.raises(DomainError):
        SpaceGrid(interval(0.0, 1.0), 0.3)
    with pytest.raises(DomainError):
        SpaceGrid(ellipse(), 0.1)
