import numpy as np
import pytest

from reflsde.errors import DomainError, StepTooLarge
from reflsde.fields import make_drift
from reflsde.geometry import disk, interval, signed_distance
from reflsde.sde import (
    BrownianPath,
    boundary_term,
    coordinate_field,
    ito_residual,
    krylov_check,
    krylov_family,
    mean_with_error,
    occupation_integral,
    reflection_angles,
    simulate_reflected,
    simulate_transformed,
    slab_indicator,
    square_norm_field,
)


def test_bridge_refinement_is_consistent():
    bp = BrownianPath(5, 1.0, 2.0**-4, 2, 50)
    coarse = bp.increments(0)
    fine = bp.increments(3)
    assert fine.shape == (128, 50, 2)
    np.testing.assert_allclose(fine.reshape(16, 8, 50, 2).sum(axis=1), coarse, atol=1e-14)


def test_paths_are_keyed_by_index():
    full = BrownianPath(9, 1.0, 0.125, 2, 6).increments(2)
    part = BrownianPath(9, 1.0, 0.125, 2, 2, first_path=3).increments(2)
    np.testing.assert_array_equal(part, full[:, 3:5])
    again = BrownianPath(9, 1.0, 0.125, 2, 6).increments(2)
    np.testing.assert_array_equal(again, full)


def test_increment_variance():
    bp = BrownianPath(2, 1.0, 2.0**-6, 1, 4000)
    inc = bp.increments(1)
    assert inc.var() / bp.dt(1) == pytest.approx(1.0, abs=0.02)


def test_bad_grids_are_rejected():
    with pytest.raises(DomainError):
        BrownianPath(0, 1.0, 0.3, 1, 1)
    with pytest.raises(DomainError):
        BrownianPath(0, 1.0, 0.25, 1, 1).level_for(0.1)


@pytest.mark.parametrize("scheme", ["projection", "penalization"])
def test_paths_stay_near_the_closure(scheme):
    dom = disk(1.0)
    bp = BrownianPath(3, 1.0, 2.0**-6, 2, 300)
    rp = simulate_reflected(scheme, make_drift(dom, "sign1d", bound=2.0), [0.3, 0.2], 1.0, bp)
    sd = signed_distance(dom, rp.X.reshape(-1, 2))
    if scheme == "projection":
        assert sd.min() >= -1e-12 and rp.slack == 0.0
    else:
        assert -sd.min() == pytest.approx(rp.slack)
    assert np.all(rp.local_time[-1] >= 0)


def test_linear_ito_residual_vanishes_pathwise():
    bp = BrownianPath(3, 1.0, 2.0**-6, 2, 500)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "sign1d", bound=2.0), [0.3, 0.2], 1.0, bp)
    for i in range(2):
        assert np.max(np.abs(ito_residual(coordinate_field(i, 2), rp))) < 1e-12


def test_quadratic_ito_residual_is_centred():
    bp = BrownianPath(4, 1.0, 2.0**-6, 2, 4000)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "zero"), [0.3, 0.2], 1.0, bp)
    m, se = mean_with_error(ito_residual(square_norm_field(2), rp))
    assert abs(m) <= 3 * se


def test_boundary_term_sign_for_square_norm():
    # grad |x|^2 . n = -2 |x| on the unit circle, so the term is -2 |L| up to midpoint shifts
    bp = BrownianPath(4, 0.5, 2.0**-7, 2, 200)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "zero"), [0.0, 0.9], 0.5, bp)
    assert np.all(boundary_term(square_norm_field(2), rp) <= 1e-12)


def test_reflection_follows_the_normal():
    bp = BrownianPath(6, 1.0, 2.0**-6, 2, 300)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "constant", vector=[1.0, 0.5]), [0.0, 0.0], 1.0, bp)
    ang = reflection_angles(rp)
    assert ang.size > 0 and ang.max() < 1e-8


def test_interval_symmetry():
    bp = BrownianPath(2, 1.0, 2.0**-6, 1, 20_000)
    rp = simulate_reflected("projection", make_drift(interval(0.0, 1.0), "zero"), 0.5, 1.0, bp)
    m, se = mean_with_error(rp.X[-1, :, 0])
    assert abs(m - 0.5) <= 3 * se


def test_transformed_scheme_with_identity_matches_projection(disk_zero_transform):
    bp = BrownianPath(8, 1.0 / 16, 2.0**-8, 2, 100)
    a = simulate_reflected("projection", make_drift(disk(1.0), "zero"), [0.0, 0.9], 1.0 / 16, bp)
    b = simulate_transformed(disk_zero_transform, [0.0, 0.9], 1.0 / 16, bp)
    np.testing.assert_allclose(a.X, b.X, atol=1e-9)


def test_step_guard_is_opt_in():
    bp = BrownianPath(1, 1.0, 0.25, 2, 200)
    drift = make_drift(disk(1.0), "zero")
    simulate_reflected("projection", drift, [0.0, 0.9], 1.0, bp)
    with pytest.raises(StepTooLarge):
        simulate_reflected("projection", drift, [0.0, 0.9], 1.0, bp, max_exit=1e-3)


def test_start_outside_rejected():
    with pytest.raises(DomainError):
        simulate_reflected("projection", make_drift(disk(1.0), "zero"), [2.0, 0.0], 1.0,
                           BrownianPath(0, 1.0, 0.25, 2, 3))


def test_constant_function_krylov_ratio():
    bp = BrownianPath(3, 1.0, 2.0**-5, 2, 50)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "zero"), [0.0, 0.0], 1.0, bp)
    lhs, rhs, ratio = krylov_check(rp, lambda t, x: np.ones(len(x)), disk(1.0))
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(np.pi ** (1 / 3), rel=1e-10)


def test_occupation_of_slab_is_bounded_by_time():
    bp = BrownianPath(3, 1.0, 2.0**-5, 2, 200)
    rp = simulate_reflected("projection", make_drift(disk(1.0), "zero"), [0.0, 0.0], 1.0, bp)
    f = slab_indicator(0.0, 0.1)
    occ = occupation_integral(rp, f)
    assert np.all((occ >= 0) & (occ <= 1.0 + 1e-12))
    fam = krylov_family(rp, disk(1.0), n_positions=3)
    vals = list(fam["M8"].values())
    assert vals == sorted(vals)
    assert all(fam["per_width_max"][w] <= fam["M8"][w] for w in fam["M8"])
