"""The transform x -> u(t, x), its inverse, and the constants it certifies.

The ledger records every constant with its provenance:

* ``assumed``  closed-form properties of the domain taken as given,
* ``verified`` values computed from other entries and checked by direct evaluation,
* ``fitted``   values chosen by a sweep that shrinks until a check passes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InfeasibleAngle, InvalidRange, MissingConstant, NoAdmissibleT, NonConvergence, OutsideTube
from .fields import DriftField, SpaceTimeVectorField
from .io import atomic_write_text, dumps17
from .geometry import (
    DomainSpec,
    as_points,
    boundary_normal,
    cone_contains,
    project_to_boundary,
    sample_cone,
    signed_distance,
)
from .pde import ParabolicProblem, extend_across_boundary, holder_estimate, solve_neumann_terminal

DET_BAND = (0.45, 2.1)
PROVENANCES = ("assumed", "fitted", "verified")


# -- ledger -----------------------------------------------------------------


@dataclass
class ConstantsLedger:
    entries: dict = field(default_factory=dict)
    path: Path | None = None

    def set(self, name, value, provenance, note=""):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{provenance}'")
        if isinstance(value, (np.floating, np.integer)):
            value = value.item()
        self.entries[name] = {"value": value, "provenance": provenance, "note": note}
        return value

    def get(self, name, default=None):
        entry = self.entries.get(name)
        return default if entry is None else entry["value"]

    def require(self, *names):
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise MissingConstant(f"ledger lacks {', '.join(missing)}")
        vals = [self.entries[n]["value"] for n in names]
        return vals[0] if len(vals) == 1 else vals

    def __contains__(self, name):
        return name in self.entries

    def snapshot(self):
        return {k: dict(v) for k, v in sorted(self.entries.items())}

    def update(self, other: "ConstantsLedger"):
        self.entries.update(other.snapshot())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.exists():
            return cls(json.loads(path.read_text()), path)
        return cls({}, path)

    def save(self, path=None):
        path = Path(path or self.path)
        atomic_write_text(path, dumps17(self.snapshot()) + "\n")
        self.path = path
        return path


# -- the transform ------------------------------------------------------------


class ZvonkinTransform:
    """u(t, .) on the tube G' with Newton inversion.

    ``field`` should already be extended across the boundary.
    """

    def __init__(self, field: SpaceTimeVectorField, seed_spacing=None):
        self.field = field if field.extended else extend_across_boundary(field)
        self.domain: DomainSpec = field.domain
        self.dim = self.domain.dim
        self.T = float(field.times[-1])
        self.delta0 = self.domain.delta0
        self.seed_spacing = seed_spacing or max(field.grid.h, self.delta0 / 64)
        self._seed_cloud = None
        self._seed_trees = {}

    def __call__(self, t, x):
        return self.field(t, x)

    def jacobian(self, t, x):
        return self.field.jacobian(t, x)

    def time_derivative(self, t, x, step=None):
        return self.field.time_derivative(t, x, step)

    # keep iterates inside the region where the extension is defined
    def _clamp(self, x):
        sd = signed_distance(self.domain, x)
        limit = -0.95 * self.delta0
        far = sd < limit
        if np.any(far):
            foot = project_to_boundary(self.domain, x[far])
            direction = x[far] - foot
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            x = x.copy()
            x[far] = foot + 0.95 * self.delta0 * direction
        return x

    def _seeds(self, t, y):
        if self._seed_cloud is None:
            lo, hi = self.domain.bbox(pad=0.5 * self.delta0).T
            axes = [np.arange(lo[i], hi[i] + 1e-12, self.seed_spacing) for i in range(self.dim)]
            mesh = np.meshgrid(*axes, indexing="ij")
            cloud = np.column_stack([g.ravel() for g in mesh])
            keep = signed_distance(self.domain, cloud) > -0.5 * self.delta0
            self._seed_cloud = cloud[keep]
        times = self.field.times
        k = int(np.argmin(np.abs(times - t)))
        tree = self._seed_trees.get(k)
        if tree is None:
            tree = cKDTree(self.field(times[k], self._seed_cloud))
            self._seed_trees[k] = tree
        _, idx = tree.query(y)
        return self._seed_cloud[idx].copy()

    def invert(self, t, y, x0=None, tol=1e-12, max_iter=50, strict=True):
        """Solve u(t, x) = y for x in G by damped Newton.

        Non-strict mode returns NaN rows where Newton fails or the preimage
        leaves G = {dist(x, D) < delta0 / 2}.
        """
        pts, single = as_points(y, self.dim)
        x = self._seeds(t, pts) if x0 is None else as_points(x0, self.dim)[0].copy()
        x = self._clamp(x)
        resid = self(t, x) - pts
        err = np.linalg.norm(resid, axis=1)
        active = err > tol
        for _ in range(max_iter):
            if not np.any(active):
                break
            xa = x[active]
            J = self.jacobian(t, xa)
            step = np.linalg.solve(J, resid[active][:, :, None])[:, :, 0]
            lam = np.ones(len(xa))
            base_err = err[active]
            for _ in range(30):
                trial = self._clamp(xa - lam[:, None] * step)
                r_trial = self(t, trial) - pts[active]
                e_trial = np.linalg.norm(r_trial, axis=1)
                worse = e_trial > base_err * (1 - 1e-4 * lam) + 1e-15
                if not np.any(worse):
                    break
                lam = np.where(worse, 0.5 * lam, lam)
            x[active] = trial
            resid[active] = r_trial
            err[active] = e_trial
            active = err > tol
        failed = err > max(tol, 1e-9)
        outside = signed_distance(self.domain, x) <= -0.5 * self.delta0
        if strict:
            if np.any(outside & ~failed):
                raise OutsideTube("target is not in the image of the tube G")
            if np.any(failed):
                raise NonConvergence(f"Newton inversion failed for {int(failed.sum())} points")
        x[failed | outside] = np.nan
        return x[0] if single else x


# -- sweeps ---------------------------------------------------------------------


def _tube_sample(dom, rng, n):
    """Uniform samples of G = {dist(x, D) < delta0 / 2}."""
    lo, hi = dom.bbox(pad=0.5 * dom.delta0).T
    out, count = [], 0
    while count < n:
        cand = rng.uniform(lo, hi, size=(2 * n + 16, dom.dim))
        keep = cand[signed_distance(dom, cand) > -0.5 * dom.delta0]
        out.append(keep)
        count += len(keep)
    return np.concatenate(out)[:n]


def determinant_sweep(tr: ZvonkinTransform, n_samples=10_000, T=None, seed=0, n_times=16, band=DET_BAND):
    """det D_x u over random (t, x) in [0, T] x G."""
    rng = np.random.default_rng(seed)
    T = tr.T if T is None else T
    times = np.linspace(0.0, T, n_times)
    per = int(np.ceil(n_samples / n_times))
    dets = []
    for t in times:
        x = _tube_sample(tr.domain, rng, per)
        dets.append(np.linalg.det(tr.jacobian(t, x)))
    dets = np.concatenate(dets)[:n_samples]
    lo, hi = band
    return {
        "det_min": float(dets.min()),
        "det_max": float(dets.max()),
        "violations": int(np.sum((dets < lo) | (dets > hi))),
        "samples": int(dets.size),
        "band": list(band),
    }


def estimate_bilipschitz(tr: ZvonkinTransform, n_pairs=10_000, T=None, seed=1, n_times=16):
    """Empirical M1 = min and M2 = max of |u(x) - u(y)| / |x - y| over pairs in G."""
    rng = np.random.default_rng(seed)
    T = tr.T if T is None else T
    dom = tr.domain
    per = int(np.ceil(n_pairs / n_times))
    ratios, close_ratios, close_dist, close_t = [], [], [], []
    for t in np.linspace(0.0, T, n_times):
        x = _tube_sample(dom, rng, per)
        half = per // 2
        y = np.empty_like(x)
        y[:half] = _tube_sample(dom, rng, half)
        # close pairs probe the local (Jacobian-level) behaviour
        step = rng.normal(size=(per - half, dom.dim))
        step *= (rng.uniform(1e-4, 0.125, per - half) * dom.delta0 / np.linalg.norm(step, axis=1))[:, None]
        y[half:] = x[half:] + step
        ok = signed_distance(dom, y) > -0.5 * dom.delta0
        x, y = x[ok], y[ok]
        dist = np.linalg.norm(x - y, axis=1)
        keep = dist > 1e-12
        x, y, dist = x[keep], y[keep], dist[keep]
        r = np.linalg.norm(tr(t, x) - tr(t, y), axis=1) / dist
        ratios.append(r)
        close = dist < 0.125 * dom.delta0
        close_ratios.append(r[close])
        close_dist.append(dist[close])
        close_t.append(np.full(int(close.sum()), t))
    ratios = np.concatenate(ratios)
    return {
        "M1": float(ratios.min()),
        "M2": float(ratios.max()),
        "pairs": int(ratios.size),
        "close_ratios": np.concatenate(close_ratios),
        "close_times": np.concatenate(close_t),
    }


# -- cones ------------------------------------------------------------------------


def domain_cone(dom: DomainSpec, seed=3, n=4000):
    """Cone angle and height for which D itself satisfies the two cone conditions.

    Tries theta = pi/3 with the largest admissible height (radius <= delta0),
    confirms by probing, and halves the height until the probe passes.
    """
    rng = np.random.default_rng(seed)
    theta = np.pi / 3
    height = dom.delta0
    for _ in range(20):
        x = dom.sample_boundary(rng, n)
        nrm = boundary_normal(dom, x)
        y_out = sample_cone(rng, x, -nrm, theta, height, n)
        y_in = sample_cone(rng, x, nrm, theta, height, n)
        bad = np.sum(signed_distance(dom, y_out) >= 0.0) + np.sum(signed_distance(dom, y_in) <= 0.0)
        if bad == 0:
            return theta, height
        height *= 0.5
    raise InfeasibleAngle("no admissible cone height for the domain")


def verify_cone_conditions(tr: ZvonkinTransform, theta0, delta2, n_triples=10_000, T=None, seed=4,
                           n_times=16, tol=1e-9):
    """Probe both image cones: outward ones miss u(t, closure D), inward ones lie in u(t, D)."""
    rng = np.random.default_rng(seed)
    dom = tr.domain
    T = tr.T if T is None else T
    per = int(np.ceil(n_triples / (2 * n_times)))
    bad_out = bad_in = total = 0
    worst = []
    for t in np.linspace(0.0, T, n_times):
        x = dom.sample_boundary(rng, per)
        nrm = boundary_normal(dom, x)
        apex = tr(t, x)
        y_out = sample_cone(rng, apex, -nrm, theta0, delta2, per)
        y_in = sample_cone(rng, apex, nrm, theta0, delta2, per)
        assert np.all(cone_contains(apex, -nrm, theta0, delta2, y_out))
        pre_out = tr.invert(t, y_out)
        pre_in = tr.invert(t, y_in)
        sd_out = signed_distance(dom, pre_out)
        sd_in = signed_distance(dom, pre_in)
        bad_out += int(np.sum(sd_out > tol))
        bad_in += int(np.sum(sd_in < -tol))
        worst.append(max(float(sd_out.max()), float(-sd_in.min())))
        total += 2 * per
    return {
        "exterior_violations": bad_out,
        "interior_violations": bad_in,
        "violations": bad_out + bad_in,
        "triples": total,
        "worst_margin": float(max(worst)),
        "theta0": float(theta0),
        "delta2": float(delta2),
    }


def theta0_formula(theta, M0, alpha0, T1, dim):
    """Cone angle after the transform; None when the formula has no solution."""
    M3 = dim * M0
    num = np.cos(theta) + dim * M0 * T1**alpha0
    den = 1.0 - M3 * T1**alpha0
    if den <= 0 or num / den >= 1.0:
        return None
    return float(np.arccos(num / den))


# -- horizon selection ----------------------------------------------------------


@dataclass
class TransformBundle:
    transform: ZvonkinTransform
    solution: object
    ledger: ConstantsLedger
    reports: dict


def build_transform(drift: DriftField, T, h=2.0**-7, dt=2.0**-10, n_angle=0, mollify_level=None):
    problem = ParabolicProblem(drift, T, h=h, dt=dt, n_angle=n_angle, mollify_level=mollify_level)
    sol = solve_neumann_terminal(problem)
    return ZvonkinTransform(extend_across_boundary(sol.field)), sol


def select_T1(drift: DriftField, candidates=None, h=2.0**-7, dt=2.0**-10, n_angle=0, mollify_level=None,
              n_samples=10_000, n_triples=10_000, ledger=None, seed=0):
    """Largest horizon in the dyadic ladder passing the determinant band and both cone conditions."""
    dom = drift.domain
    ledger = ledger or ConstantsLedger()
    if candidates is None:
        candidates = [2.0**-k for k in range(0, 11)]
    candidates = sorted(candidates, reverse=True)
    theta_D, height_D = domain_cone(dom)
    tried = []
    for T in candidates:
        tr, sol = build_transform(drift, T, h, dt, n_angle, mollify_level)
        det = determinant_sweep(tr, n_samples, seed=seed)
        if det["violations"]:
            tried.append({"T": T, "det": det})
            continue
        alpha0, M0, degenerate = holder_estimate(tr.field)
        lip = estimate_bilipschitz(tr, n_samples, seed=seed + 1)
        delta1 = lip["M1"] * dom.delta0 / 2
        delta2 = min(delta1 / 2, lip["M1"] * height_D)
        theta0 = theta0_formula(theta_D, M0, alpha0, T, dom.dim)
        theta_src = "verified"
        cone = None
        if theta0 is not None:
            cone = verify_cone_conditions(tr, theta0, delta2, n_triples, seed=seed + 2)
        if theta0 is None or cone["violations"]:
            theta_src = "fitted"
            for k in range(0, 8):
                theta0 = theta_D * (1.0 - k / 16)
                cone = verify_cone_conditions(tr, theta0, delta2, n_triples, seed=seed + 2)
                if cone["violations"] == 0:
                    break
        tried.append({"T": T, "det": det, "cone": cone})
        if cone["violations"]:
            continue
        close = lip["close_ratios"]
        M3 = dom.dim * M0
        lower = 1.0 - M3 * T**alpha0
        led = ConstantsLedger()
        led.set("delta0", dom.delta0, "assumed", "uniform sphere radius of the preset")
        led.set("T1", T, "fitted", "largest dyadic horizon passing determinant band and cone probes")
        led.set("alpha0", alpha0, "fitted", "slope of log time-modulus of (u, Du)")
        led.set("M0", M0, "fitted", "envelope of time-modulus over stored slices")
        led.set("M1", lip["M1"], "fitted", "min bi-Lipschitz ratio over sampled pairs")
        led.set("M2", lip["M2"], "fitted", "max bi-Lipschitz ratio over sampled pairs")
        led.set("M3", M3, "verified", "d * M0")
        led.set("delta1", delta1, "verified", "M1 * delta0 / 2")
        led.set("theta_D", theta_D, "fitted", "cone angle of the domain itself")
        led.set("r_D", height_D, "fitted", "cone height of the domain itself")
        led.set("theta0", theta0, theta_src, "image cone angle")
        led.set("delta2", delta2, "verified", "min(delta1 / 2, M1 r_D)")
        t0_bound = None
        if M0 > 0:
            t0_bound = min((1.0 / (dom.dim * M0)) ** (1 / alpha0), (dom.delta0 / (8 * M0)) ** (1 / alpha0))
        led.set("T0_bound", t0_bound if t0_bound is not None else float("inf"), "verified",
                "min((1/(d M0))^(1/alpha0), (delta0/(8 M0))^(1/alpha0))")
        reports = {
            "det": det,
            "cone": cone,
            "bilipschitz": {"M1": lip["M1"], "M2": lip["M2"], "pairs": lip["pairs"]},
            "close_pairs": {
                "lower_bound": lower,
                "min_ratio": float(close.min()) if close.size else None,
                "violations": int(np.sum(close < lower - 1e-9)) if lower > 0 else 0,
                "informative": bool(lower > 0),
            },
            "holder": {"alpha0": alpha0, "M0": M0, "degenerate": degenerate},
            "tried": tried,
            "pde_residual": sol.max_residual,
        }
        ledger.update(led)
        return TransformBundle(tr, sol, ledger, reports)
    raise NoAdmissibleT(f"no horizon in {candidates} passed: {tried[-1] if tried else None}")


# -- the transversality angle -------------------------------------------------------


def _theta1_margins(th, theta0, kappa=1.0):
    """Margins of the four angle inequalities (positive means satisfied)."""
    th = np.asarray(th, dtype=float)
    c = np.cos(th)
    tau = np.tan(th)
    a = np.sqrt(2.0 - 2.0 * c)
    k2 = kappa * kappa
    A = (c - a) / (1.0 + 12.0 * tau) - a
    m1 = c * c + A * A - 1.0
    m2 = A - np.cos(theta0 / 2)
    root = np.sqrt(np.maximum(k2 - 4.0 * tau * tau, 0.0))
    num3 = root * c - 2.0 * tau - 0.5
    den3 = np.sqrt(np.maximum(1.25 * k2 + 4 * tau * tau + 2 * tau - root * c, 1e-300))
    m3 = num3 / den3 - np.cos(theta0)
    num4 = root * c - 2.0 * tau + 0.5 * c
    den4 = np.sqrt(2.25 * k2 + 4 * tau * tau + 2 * tau)
    m4 = num4 / den4 - np.cos(theta0)
    return np.stack([m1, m2, m3, m4])


def theta1_margins(theta1, theta0, kappa=1.0):
    return [float(v) for v in _theta1_margins(theta1, theta0, kappa)]


def solve_theta1(theta0, n_grid=100_000):
    """Largest theta1 in (0, min(theta0/2, arctan(1/24))) meeting all four inequalities."""
    if not 0.0 < theta0 < np.pi / 2:
        raise InvalidRange("theta0 must lie in (0, pi/2)")
    upper = min(theta0 / 2, np.arctan(1.0 / 24.0))
    grid = upper * (np.arange(1, n_grid + 1) / (n_grid + 1))
    m = _theta1_margins(grid, theta0)
    ok = (m[0] >= 0) & (m[1] >= 0) & (m[2] > 0) & (m[3] > 0)
    if not np.any(ok):
        raise InfeasibleAngle(f"no theta1 satisfies the angle inequalities for theta0={theta0}")
    return float(grid[np.nonzero(ok)[0].max()])


def solve_kappa(theta1, theta0, n_grid=10_000):
    """kappa in (1/2, 1) for the shrunken-ball variants; midway between the smallest feasible value and 1."""
    ks = 0.5 + 0.5 * (np.arange(1, n_grid) / n_grid)
    m = _theta1_margins(np.full_like(ks, theta1), theta0, ks)
    ok = (m[2] > 0) & (m[3] > 0)
    if not np.any(ok):
        raise InfeasibleAngle("no kappa in (1/2, 1) satisfies the shrunken inequalities")
    kmin = ks[np.nonzero(ok)[0].min()]
    kappa = 0.5 * (kmin + 1.0)
    if not np.all(_theta1_margins(theta1, theta0, kappa)[2:] > 0):
        kappa = float(ks[np.nonzero(ok)[0].max()])
    return float(kappa)


# -- the moving domain ------------------------------------------------------------


class TimeDependentDomain:
    """u(t, D) described through the inverse transform."""

    def __init__(self, tr: ZvonkinTransform, n_boundary=2048):
        self.tr = tr
        self.domain = tr.domain
        self.n_boundary = n_boundary
        self._cache = {}

    def contains(self, t, y, closed=False):
        x = self.tr.invert(t, y, strict=False)
        sd = signed_distance(self.domain, np.nan_to_num(x, nan=1e6))
        inside = sd >= 0 if closed else sd > 0
        return inside & ~np.isnan(x).any(axis=1)

    def boundary(self, t):
        key = float(t)
        pts = self._cache.get(key)
        if pts is None:
            pts = self.tr(t, self.domain.boundary_points(self.n_boundary))
            self._cache[key] = pts
        return pts

    def distance_to_boundary(self, t, y):
        """Distance from y to the image boundary u(t, boundary D)."""
        y = as_points(y, self.domain.dim)[0]
        poly = self.boundary(t)
        if self.domain.dim == 1:
            return np.min(np.abs(y - poly.T), axis=1)
        a = poly
        b = np.roll(poly, -1, axis=0)
        ab = b - a
        best = np.full(len(y), np.inf)
        # chunk over segments to bound memory
        for s in range(0, len(a), 256):
            aa, ab_ = a[s:s + 256], ab[s:s + 256]
            ap = y[:, None, :] - aa[None, :, :]
            lam = np.clip(np.sum(ap * ab_[None], axis=2) / np.sum(ab_ * ab_, axis=1)[None], 0.0, 1.0)
            d = np.linalg.norm(ap - lam[:, :, None] * ab_[None], axis=2)
            best = np.minimum(best, d.min(axis=1))
        return best

    def inner_region(self, t, y, c):
        """Membership of D(t, c) = {y : dist(y, complement of u(t, D)) > c}."""
        inside = self.contains(t, y)
        return inside & (self.distance_to_boundary(t, y) > c)
