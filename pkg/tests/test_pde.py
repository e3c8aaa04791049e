import numpy as np
import pytest

from reflsde.fields import make_drift
from reflsde.geometry import disk, interval
from reflsde.pde import ParabolicProblem, extend_across_boundary, holder_estimate, solve_neumann_terminal


def _max_error(field, dom, T, shift, rng, n=500):
    x = dom.sample_inside(rng, n)
    return max(float(np.max(np.abs(field(t, x) - (x + (T - t) * shift)))) for t in np.linspace(0, T, 5))


def test_zero_drift_gives_identity_on_interval(rng):
    dom = interval(0.0, 1.0)
    sol = solve_neumann_terminal(ParabolicProblem(make_drift(dom, "zero"), 1.0))
    assert _max_error(sol.field, dom, 1.0, np.zeros(1), rng) <= 1e-10


def test_constant_drift_is_a_translation_on_interval(rng):
    dom = interval(0.0, 1.0)
    b = make_drift(dom, "constant", vector=[0.7])
    sol = solve_neumann_terminal(ParabolicProblem(b, 1.0))
    assert _max_error(sol.field, dom, 1.0, np.array([0.7]), rng) <= 1e-6


def test_constant_drift_on_coarse_disk(rng):
    dom = disk(1.0)
    b = make_drift(dom, "constant", vector=[0.7, -0.3])
    sol = solve_neumann_terminal(ParabolicProblem(b, 0.25, h=2.0**-4, dt=2.0**-8, n_angle=32))
    assert _max_error(sol.field, dom, 0.25, np.array([0.7, -0.3]), rng) <= 1e-6


def test_terminal_value_is_identity_for_sign_drift(rng):
    dom = interval(0.0, 1.0)
    sol = solve_neumann_terminal(ParabolicProblem(make_drift(dom, "sign1d", bound=2.0), 0.25))
    x = dom.sample_inside(rng, 100)
    np.testing.assert_allclose(sol.field(0.25, x), x, atol=1e-12)
    assert sol.max_residual < 1e-6
    alpha0, M0, _ = holder_estimate(sol.field)
    assert 0 < alpha0 <= 1.0 and M0 > 0


def test_extension_is_continuous_across_boundary():
    dom = interval(0.0, 1.0)
    sol = solve_neumann_terminal(ParabolicProblem(make_drift(dom, "sign1d", bound=2.0), 0.25))
    ext = extend_across_boundary(sol.field)
    eps = 1e-7
    for edge in (0.0, 1.0):
        inner = ext(0.1, np.array([[edge + (eps if edge == 0 else -eps)]]))
        outer = ext(0.1, np.array([[edge - (eps if edge == 0 else -eps)]]))
        assert abs(inner[0, 0] - outer[0, 0]) < 1e-5
