import numpy as np
import pytest

from reflsde.flows import (
    DirectionField,
    fit_rho0,
    flow,
    flow_diagnostics,
    hitting_time,
    make_chart,
    transversality_check,
)
from reflsde.zvonkin import ConstantsLedger, solve_theta1


@pytest.fixture(scope="module")
def field(disk_zero_transform):
    return DirectionField(disk_zero_transform)


def test_direction_is_inward_normal_for_identity(field):
    y = np.array([[0.9, 0.0], [0.0, -1.05], [0.6, 0.6]])
    expected = -y / np.linalg.norm(y, axis=1, keepdims=True)
    np.testing.assert_allclose(field(0.0, y), expected, atol=1e-10)


def test_radial_flow_and_its_jacobian(field):
    x = np.array([[0.9, 0.0], [0.5, 0.6]])
    r = 0.2
    st = flow(field, 0.0, x, r)
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    np.testing.assert_allclose(st.y, x * (1 - r / nx), atol=1e-10)
    for k in range(2):
        xk, n = x[k], nx[k, 0]
        psi = np.eye(2) - r * (np.eye(2) / n - np.outer(xk, xk) / n**3)
        np.testing.assert_allclose(st.psi[k], psi, atol=1e-6)


def test_zero_length_flow_is_identity(field):
    x = np.array([[0.8, 0.1]])
    st = flow(field, 0.0, x, 0.0)
    np.testing.assert_array_equal(st.y, x)
    np.testing.assert_allclose(st.psi[0], np.eye(2))


def test_hitting_time_matches_closed_form(field):
    z = np.array([1.0, 0.0])
    x = np.array([[0.95, 0.01], [0.97, -0.02], [0.99, 0.0]])
    rec = hitting_time(field, 0.0, x, 0.0, z, 0.2)
    nx = np.linalg.norm(x, axis=1)
    expected = nx * (1 - 1 / x[:, 0])
    assert np.all(rec.defined)
    np.testing.assert_allclose(rec.gamma_time, expected, atol=1e-10)
    assert np.max(rec.defect) <= 1e-9


def test_hitting_outside_window_is_flagged(field):
    rec = hitting_time(field, 0.0, np.array([[0.2, 0.0]]), 0.0, np.array([1.0, 0.0]), 0.1)
    assert not rec.defined[0]
    assert np.isnan(rec.gamma_time[0])


def test_transversality_of_identity_normal_field(field):
    th1 = solve_theta1(np.pi / 3)
    rep = transversality_check(field, 0.0, np.array([1.0, 0.0]), 1e-3, 0.01, th1)
    assert rep["pass"] and rep["unit"]


def test_fit_rho0_positive(field):
    assert 0 < fit_rho0(field, n_samples=100) <= 0.5


def test_chart_requires_ledger_constants(field):
    led = ConstantsLedger()
    led.set("theta0", np.pi / 3, "fitted")
    with pytest.raises(Exception):
        make_chart(field, 0.0, np.array([1.0, 0.0]), led)
    for k, v in (("theta1", 0.01), ("delta3", 0.004), ("eta", 0.001), ("rho0", 0.06)):
        led.set(k, v, "fitted")
    chart = make_chart(field, 0.0, np.array([1.0, 0.0]), led)
    np.testing.assert_allclose(chart.gamma0, [-1.0, 0.0], atol=1e-10)
    assert chart.z[0] < 1.0


def test_diagnostics_on_sign_drift(disk_sign_transform):
    rep = flow_diagnostics(DirectionField(disk_sign_transform), solve_theta1(np.pi / 3), n_points=20)
    assert rep["pass"], rep
