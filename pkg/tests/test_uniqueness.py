import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflsde.errors import DomainError, HypothesisViolated, InvalidRange
from reflsde.fields import make_drift
from reflsde.geometry import disk
from reflsde.testfns import DupuisG, Omega, PairFunction
from reflsde.uniqueness import (
    LyapunovTrace,
    PairExperiment,
    SchemeConfig,
    gronwall_inputs,
    gronwall_prefactor,
    lyapunov_trace,
    pathwise_gap,
    sign_check_A1,
    stochastic_gronwall_bound,
    trace_summary,
)


def test_scheme_validation():
    with pytest.raises(DomainError):
        SchemeConfig("euler")
    with pytest.raises(InvalidRange):
        SchemeConfig("projection", 0)
    assert SchemeConfig("projection", 2).label == "projectionx2"


def test_identical_schemes_have_zero_gap():
    exp = PairExperiment(make_drift(disk(1.0), "sign1d", bound=2.0), SchemeConfig(), SchemeConfig(), [0.0, 0.5],
                         0.25, 3, dt_ladder=(2.0**-6, 2.0**-7))
    rep = pathwise_gap(exp, 200)
    assert all(r["mean"] == 0.0 for r in rep["rows"])
    assert rep["monotone"]


def test_gap_ladder_is_sorted_and_deterministic():
    exp = PairExperiment(make_drift(disk(1.0), "zero"), SchemeConfig(), SchemeConfig("penalization"), [0.0, 0.5],
                         0.5, 4, dt_ladder=(2.0**-8, 2.0**-6))
    a = pathwise_gap(exp, 200)
    b = pathwise_gap(exp, 200)
    assert [r["dt"] for r in a["rows"]] == [2.0**-6, 2.0**-8]
    assert a == b


def test_prefactor_at_the_proof_exponents():
    assert gronwall_prefactor(0.5, 0.25) == pytest.approx(16.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0))
def test_gronwall_on_constants(eta):
    xi = np.full((5, 3), eta)
    zero = np.zeros((5, 3))
    rep = stochastic_gronwall_bound(xi, xi, zero, zero)
    assert rep["lhs"] == pytest.approx(eta)
    assert rep["rhs"] == pytest.approx(16 * eta)
    assert rep["pass"]


def test_gronwall_rejects_malformed_inputs():
    xi = np.ones((4, 2))
    with pytest.raises(HypothesisViolated):
        stochastic_gronwall_bound(xi, 0.1 * xi, np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(HypothesisViolated):
        stochastic_gronwall_bound(xi, xi, -np.ones((4, 2)) * np.arange(4)[:, None])
    with pytest.raises(InvalidRange):
        stochastic_gronwall_bound(xi, xi, np.zeros((4, 2)), p=0.2, q=0.3)


def test_gronwall_stops_at_tau_R():
    xi = np.array([[1.0], [1.0], [5.0]])
    A = np.array([[0.0], [2.0], [4.0]])
    rep = stochastic_gronwall_bound(xi, xi, A, R=1.0)
    assert rep["lhs"] == pytest.approx(1.0)


def test_sign_check_without_events_is_vacuous():
    rep = sign_check_A1([])
    assert rep["events"] == 0 and rep["pass"]


@pytest.fixture(scope="module")
def pair_function(disk_zero_transform):
    g = DupuisG(np.pi / 3)
    g.fit_M5(2)
    return PairFunction(disk_zero_transform, Omega(g), 0.1)


def test_same_path_pair_has_F_equal_eps_Z(disk_zero_transform, identity_H, pair_function):
    exp = PairExperiment(make_drift(disk(1.0), "zero"), SchemeConfig(), SchemeConfig(), [0.0, 0.9], 1.0 / 16, 5,
                         dt_ladder=(2.0**-6,), eps=0.1, lam=2.0, transform=disk_zero_transform)
    tr = lyapunov_trace(exp, identity_H, pair_function, 20)
    np.testing.assert_allclose(tr.F, 0.1 * tr.Z, rtol=1e-12)
    assert np.all(tr.gap_sq == 0.0)
    summary = trace_summary(tr, M7=0.1)
    assert summary["Z_in_unit_interval"] and summary["gap_scaling_violations"] == 0


def test_no_reflection_means_no_A1(disk_zero_transform, identity_H, pair_function):
    exp = PairExperiment(make_drift(disk(1.0), "zero"), SchemeConfig(), SchemeConfig(), [0.0, 0.0],
                         1.0 / 64, 6, dt_ladder=(2.0**-8,), eps=0.1, lam=2.0, transform=disk_zero_transform,
                         x0_b=[0.1, 0.0])
    tr = lyapunov_trace(exp, identity_H, pair_function, 20)
    assert len(tr.events["step"]) == 0
    assert np.all(tr.A1 == 0.0)
    xi, eta, A, M = gronwall_inputs(tr)
    assert stochastic_gronwall_bound(xi, eta, A, M)["pass"]


def test_sign_check_reads_the_bracket():
    events = {"term_f": np.array([-1.0, 0.5]), "term_H": np.array([0.0, 1.0])}
    tr = LyapunovTrace.__new__(LyapunovTrace)
    tr.events = events
    tr.lam = 1.0
    assert sign_check_A1(tr)["violations"] == 0
    abl = sign_check_A1(tr, lam=0.0)
    assert abl["violations"] == 1 and abl["ablation"]
