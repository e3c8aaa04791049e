import numpy as np
import pytest

from reflsde.errors import InvalidRange, MissingConstant
from reflsde.fields import make_drift
from reflsde.geometry import disk, interval, signed_distance
from reflsde.zvonkin import (
    ConstantsLedger,
    build_transform,
    determinant_sweep,
    estimate_bilipschitz,
    select_T1,
    solve_kappa,
    solve_theta1,
    theta1_margins,
    verify_cone_conditions,
)


def test_ledger_roundtrip_and_require(tmp_path):
    led = ConstantsLedger()
    led.set("M6", np.float64(2.5), "fitted", "note")
    assert led.require("M6") == 2.5
    with pytest.raises(MissingConstant):
        led.require("M7")
    with pytest.raises(ValueError):
        led.set("x", 1.0, "guessed")
    led.save(tmp_path / "ledger.json")
    again = ConstantsLedger.load(tmp_path / "ledger.json")
    assert again.snapshot() == led.snapshot()


@pytest.mark.parametrize("theta0", [np.pi / 6, np.pi / 4, np.pi / 3])
def test_theta1_is_feasible(theta0):
    th = solve_theta1(theta0)
    assert 0 < th < theta0
    margins = theta1_margins(th, theta0)
    assert all(m > 0 for m in margins)
    kappa = solve_kappa(th, theta0)
    assert 0 < kappa < 1


def test_identity_transform_properties(disk_zero_transform, rng):
    tr = disk_zero_transform
    x = disk(1.0).sample_tube(rng, 200, 0.2)
    np.testing.assert_allclose(tr(0.01, x), x, atol=1e-10)
    det = determinant_sweep(tr, 500)
    assert det["violations"] == 0
    assert det["det_min"] == pytest.approx(1.0, abs=1e-8)
    lip = estimate_bilipschitz(tr, 500)
    assert lip["M1"] == pytest.approx(1.0, abs=1e-8) and lip["M2"] == pytest.approx(1.0, abs=1e-8)


def test_inverse_roundtrip(disk_sign_transform, rng):
    tr = disk_sign_transform
    x = disk(1.0).sample_tube(rng, 300, 0.2)
    for t in (0.0, 0.03, tr.T):
        np.testing.assert_allclose(tr.invert(t, tr(t, x)), x, atol=1e-10)


def test_cone_conditions_hold_for_sign_drift(disk_sign_transform):
    res = verify_cone_conditions(disk_sign_transform, np.pi / 3, 0.24, n_triples=2000)
    assert res["violations"] == 0


def test_narrow_band_flags_sign_drift(interval_sign_transform):
    det = determinant_sweep(interval_sign_transform, 2000, band=(0.9, 1.1))
    assert det["violations"] > 0


def test_select_T1_on_interval_fills_ledger():
    led = ConstantsLedger()
    bundle = select_T1(make_drift(interval(), "sign1d", bound=2.0), [0.25, 0.0625], n_samples=2000,
                       n_triples=2000, ledger=led)
    for key in ("T1", "M1", "M2", "theta0", "delta2"):
        assert key in led
    assert bundle.reports["det"]["violations"] == 0
    assert led.get("T1") in (0.25, 0.0625)
