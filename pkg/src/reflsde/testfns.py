"""Test functions for the uniqueness argument.

* ``ClampSigma`` and ``DupuisG`` build omega = sigma(g), the profile behind
  the pair function f_eps(t, x, y) = eps * omega((u(t,x) - u(t,y)) / eps, n(x)).
* ``BumpProfile``, ``LocalH`` and ``build_H`` build a nonnegative function H
  in the image domain with grad H . gamma >= 1 on the image boundary, as a
  sum of patches h * chi1 * chi2 where each h is constant along gamma-flows.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.spatial import cKDTree

from .errors import CoverFailure, InvalidRange, PropertyViolation
from .flows import DirectionField, LocalChart, cone_Cz_contains, flow, hitting_time
from .geometry import (
    as_points,
    boundary_normal,
    inward_normal_extended,
    project_to_boundary,
    smoothstep5,
    smoothstep5_deriv,
)
from .pde import holder_estimate
from .zvonkin import ConstantsLedger, ZvonkinTransform, solve_kappa

# -- sigma -------------------------------------------------------------------------


class ClampSigma:
    """C^2 convex clamp with sigma = 1 for t <= 1/2 and sigma = t for t >= 2.

    On [1/2, 2] sigma'' is the Beta(2, 4)-shaped density
    c (t - 1/2)(2 - t)^3, whose mean 1 makes sigma(2) = 2.  Convexity then
    gives sigma' >= 0 and sigma >= max(1, t) everywhere.
    """

    LO = 0.5
    HI = 2.0

    def __init__(self):
        a, b = self.LO, self.HI
        dens = -Polynomial.fromroots([a, b, b, b])
        dens = dens / (dens.integ(lbnd=a)(b))
        slope = dens.integ(lbnd=a)
        value = slope.integ(lbnd=a) + 1.0
        self._polys = (value, slope, dens)

    def __call__(self, t, order=0):
        t = np.asarray(t, dtype=float)
        out = self._polys[order](np.clip(t, self.LO, self.HI))
        below = t <= self.LO
        above = t >= self.HI
        if order == 0:
            return np.where(below, 1.0, np.where(above, t, out))
        if order == 1:
            return np.where(below, 0.0, np.where(above, 1.0, out))
        return np.where(below | above, 0.0, out)


# -- the Dupuis-type g -------------------------------------------------------------------


def _unit_rows(v):
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(n > 0, v / np.where(n > 0, n, 1.0), 0.0), n[:, 0]


@dataclass
class GDerivatives:
    value: np.ndarray
    d_rho: np.ndarray
    d_xi: np.ndarray
    d_rho_rho: np.ndarray
    d_rho_xi: np.ndarray  # [n, i, j] = d_xi_j d_rho_i
    d_xi_xi: np.ndarray


class DupuisG:
    """g(rho, xi) = |rho|^2 Phi(rho . xi / |rho|) with a cubic-tailed profile.

    Phi(s) = 1 - s^2 on [-c, c] with c = cos(theta0), plus (|s| - c)^3 beyond.
    For |xi| = 1 one has grad_rho g . xi = |rho| (1 - s^2)^2 d/ds[Phi / (1 - s^2)],
    which vanishes on the band and has the sign of s outside it.
    """

    def __init__(self, theta0):
        if not 0.0 < theta0 < np.pi / 2:
            raise InvalidRange("theta0 must lie in (0, pi/2)")
        self.theta0 = float(theta0)
        self.c = float(np.cos(theta0))
        s = np.linspace(-1.0, 1.0, 200_001)
        self.M4 = float(min(self.profile(s).min(), self.profile(np.array([-1.0, 1.0])).min()))
        self.M5 = None

    def profile(self, s, order=0):
        s = np.asarray(s, dtype=float)
        hi = np.maximum(s - self.c, 0.0)
        lo = np.maximum(-s - self.c, 0.0)
        if order == 0:
            return 1.0 - s * s + hi**3 + lo**3
        if order == 1:
            return -2.0 * s + 3.0 * hi**2 - 3.0 * lo**2
        return -2.0 + 6.0 * hi + 6.0 * lo

    def __call__(self, rho, xi):
        rho = np.atleast_2d(np.asarray(rho, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        rhat, r = _unit_rows(rho)
        s = np.sum(rhat * xi, axis=1)
        return r * r * self.profile(s)

    def derivatives(self, rho, xi) -> GDerivatives:
        rho = np.atleast_2d(np.asarray(rho, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        n, d = rho.shape
        rhat, r = _unit_rows(rho)
        s = np.sum(rhat * xi, axis=1)
        P0, P1, P2 = self.profile(s), self.profile(s, 1), self.profile(s, 2)
        v = xi - s[:, None] * rhat
        rr = r[:, None]
        eye = np.eye(d)[None]
        outer = lambda a, b: a[:, :, None] * b[:, None, :]  # noqa: E731
        value = r * r * P0
        d_rho = 2.0 * rho * P0[:, None] + rr * P1[:, None] * v
        d_xi = rr * P1[:, None] * rho
        d_rr = (
            2.0 * P0[:, None, None] * eye
            + P1[:, None, None] * (outer(rhat, v) + outer(v, rhat))
            + P2[:, None, None] * outer(v, v)
            - (s * P1)[:, None, None] * (eye - outer(rhat, rhat))
        )
        d_rx = (
            2.0 * P1[:, None, None] * outer(rho, rhat)
            + rr[:, :, None] * (P2[:, None, None] * outer(v, rhat) + P1[:, None, None] * (eye - outer(rhat, rhat)))
        )
        d_xx = (r * r * P2)[:, None, None] * outer(rhat, rhat)
        zero = r == 0
        if np.any(zero):
            for arr in (d_rho, d_xi, d_rr, d_rx, d_xx):
                arr[zero] = 0.0
        return GDerivatives(value, d_rho, d_xi, d_rr, d_rx, d_xx)

    # -- constants and the property verifier

    def _ratio_families(self, rho, xi):
        D = self.derivatives(rho, xi)
        r = np.linalg.norm(rho, axis=1)
        return {
            "grad_rho": np.linalg.norm(D.d_rho, axis=1) / r,
            "grad_xi": np.linalg.norm(D.d_xi, axis=1) / r**2,
            "hess_rho_rho": np.linalg.norm(D.d_rho_rho, axis=(1, 2)),
            "hess_rho_xi": np.linalg.norm(D.d_rho_xi, axis=(1, 2)) / r,
            "hess_xi_xi": np.linalg.norm(D.d_xi_xi, axis=(1, 2)) / r**2,
        }

    def fit_M5(self, dim=2, n_mag=401, n_angle=720, margin=1.01):
        """Largest scale-free derivative ratio over a grid of (rho direction, xi).

        g is jointly rotation invariant and the ratios are homogeneous of
        degree zero in rho, so rho = e1 and xi in the closed unit ball suffice.
        Frobenius norms bound every matrix entry.
        """
        mags = np.linspace(0.0, 1.0, n_mag)
        if dim == 1:
            xi = np.concatenate([mags, -mags])[:, None]
        else:
            ang = np.linspace(0.0, 2 * np.pi, n_angle, endpoint=False)
            A, B = np.meshgrid(mags, ang, indexing="ij")
            xi = np.column_stack([(A * np.cos(B)).ravel(), (A * np.sin(B)).ravel()])
        rho = np.zeros_like(xi)
        rho[:, 0] = 1.0
        fam = self._ratio_families(rho, xi)
        self.M5 = float(margin * max(float(v.max()) for v in fam.values()))
        return self.M5

    def sample(self, rng, n, dim):
        """(rho, xi) pairs: half with |xi| = 1, half uniform in the unit ball."""
        rho = rng.normal(size=(n, dim))
        rho /= np.linalg.norm(rho, axis=1, keepdims=True)
        rho *= 10.0 ** rng.uniform(-3, 2, n)[:, None]
        xi = rng.normal(size=(n, dim))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        half = n // 2
        xi[half:] *= rng.random(n - half)[:, None] ** (1.0 / dim)
        return rho, xi

    def verify(self, n_samples=100_000, dim=2, seed=0, raise_on_violation=True):
        """Check properties (i)-(vi) on random samples; returns per-property margins."""
        if self.M5 is None:
            self.fit_M5(dim)
        rng = np.random.default_rng(seed)
        rho, xi = self.sample(rng, n_samples, dim)
        D = self.derivatives(rho, xi)
        r = np.linalg.norm(rho, axis=1)
        unit = np.abs(np.linalg.norm(xi, axis=1) - 1.0) < 1e-12
        s = np.sum(rho * xi, axis=1) / r
        along = np.sum(D.d_rho * xi, axis=1)
        report = {}
        bad = {}

        def record(name, margin, mask=None):
            m = margin if mask is None else margin[mask]
            idx = None if mask is None else np.nonzero(mask)[0]
            viol = m < 0
            report[name] = {"checked": int(m.size), "violations": int(viol.sum()),
                            "min_margin": float(m.min()) if m.size else None}
            if viol.any():
                k = int(np.argmin(m))
                bad[name] = int(k if idx is None else idx[k])

        g0 = self(np.zeros_like(xi), xi)
        D0 = self.derivatives(np.zeros_like(xi), xi)
        zero_mag = np.abs(g0) + np.linalg.norm(D0.d_rho, axis=1) + np.linalg.norm(D0.d_xi, axis=1)
        record("i_zero_at_origin", -zero_mag)
        record("ii_lower_bound", D.value - self.M4 * r * r + 1e-12 * r * r)
        tol = 1e-12 * r
        record("iii_outward_sign", along + tol, unit & (s >= -self.c))
        record("iv_inward_sign", tol - along, unit & (s <= self.c))
        record("band_flat", tol - np.abs(along), unit & (np.abs(s) <= self.c))
        fam = self._ratio_families(rho, xi)
        record("v_first_derivatives", self.M5 - np.maximum(fam["grad_rho"], fam["grad_xi"]))
        record("vi_second_derivatives",
               self.M5 - np.maximum.reduce([fam["hess_rho_rho"], fam["hess_rho_xi"], fam["hess_xi_xi"]]))
        report["M4"] = self.M4
        report["M5"] = self.M5
        report["pass"] = not bad
        if bad and raise_on_violation:
            name, k = next(iter(bad.items()))
            raise PropertyViolation(f"property {name} fails", (rho[k].tolist(), xi[k].tolist()))
        return report


def dupuis_g(theta0, n_samples=100_000, dim=2, seed=0) -> DupuisG:
    """Construct g for the cone angle theta0 and reject it unless the verifier passes."""
    g = DupuisG(theta0)
    g.fit_M5(dim)
    g.last_report = g.verify(n_samples, dim, seed)
    return g


# -- omega and the pair function ------------------------------------------------------------


class Omega:
    """omega(rho, xi) = sigma(g(rho, xi)) with derivatives by the chain rule."""

    def __init__(self, g: DupuisG, sigma: ClampSigma | None = None):
        self.g = g
        self.sigma = sigma or ClampSigma()

    def __call__(self, rho, xi):
        return self.sigma(self.g(rho, xi))

    def derivatives(self, rho, xi) -> GDerivatives:
        D = self.g.derivatives(rho, xi)
        s1 = self.sigma(D.value, 1)
        s2 = self.sigma(D.value, 2)
        outer = lambda a, b: a[:, :, None] * b[:, None, :]  # noqa: E731
        return GDerivatives(
            self.sigma(D.value),
            s1[:, None] * D.d_rho,
            s1[:, None] * D.d_xi,
            s2[:, None, None] * outer(D.d_rho, D.d_rho) + s1[:, None, None] * D.d_rho_rho,
            s2[:, None, None] * outer(D.d_rho, D.d_xi) + s1[:, None, None] * D.d_rho_xi,
            s2[:, None, None] * outer(D.d_xi, D.d_xi) + s1[:, None, None] * D.d_xi_xi,
        )

    def bound_ratios(self, rho, xi):
        """Ratios whose sup is the omega part of M6 (first and second derivative bounds)."""
        D = self.derivatives(rho, xi)
        r = np.linalg.norm(rho, axis=1)
        safe = np.where(r > 0, r, 1.0)
        return {
            "grad_rho": np.linalg.norm(D.d_rho, axis=1) / safe,
            "grad_xi": np.linalg.norm(D.d_xi, axis=1) / safe**2,
            "hess_rho_rho": np.linalg.norm(D.d_rho_rho, axis=(1, 2)),
            "hess_rho_xi": np.linalg.norm(D.d_rho_xi, axis=(1, 2)) / safe,
            "hess_xi_xi": np.linalg.norm(D.d_xi_xi, axis=(1, 2)) / safe**2,
        }


class PairFunction:
    """f_eps(t, x, y) = eps * omega((u(t,x) - u(t,y)) / eps, n(x)) with n the extended inward normal."""

    def __init__(self, transform: ZvonkinTransform, omega: Omega, eps, normal_step=1e-6):
        if eps <= 0:
            raise InvalidRange("eps must be positive")
        self.tr = transform
        self.omega = omega
        self.eps = float(eps)
        self.domain = transform.domain
        self.dim = transform.dim
        self.normal_step = normal_step

    def with_eps(self, eps):
        return PairFunction(self.tr, self.omega, eps, self.normal_step)

    def normal(self, x):
        return inward_normal_extended(self.domain, x)

    def normal_jacobian(self, x):
        """J[n, i, k] = d n_i / d x_k by central differences."""
        x, _ = as_points(x, self.dim)
        h = self.normal_step
        J = np.empty((len(x), self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            J[:, :, k] = (self.normal(x + e) - self.normal(x - e)) / (2 * h)
        return J

    def _rho(self, t, x, y):
        return (self.tr(t, x) - self.tr(t, y)) / self.eps

    def __call__(self, t, x, y):
        x, _ = as_points(x, self.dim)
        y, _ = as_points(y, self.dim)
        return self.eps * self.omega(self._rho(t, x, y), self.normal(x))

    def gradients(self, t, x, y):
        """(f, grad_x f, grad_y f, omega derivatives) from the chain rule."""
        x, _ = as_points(x, self.dim)
        y, _ = as_points(y, self.dim)
        rho = self._rho(t, x, y)
        D = self.omega.derivatives(rho, self.normal(x))
        Jx = self.tr.jacobian(t, x)
        Jy = self.tr.jacobian(t, y)
        Jn = self.normal_jacobian(x)
        gx = np.einsum("ni,nij->nj", D.d_rho, Jx) + self.eps * np.einsum("ni,nij->nj", D.d_xi, Jn)
        gy = -np.einsum("ni,nij->nj", D.d_rho, Jy)
        return self.eps * D.value, gx, gy, D


def sample_pairs(dom, rng, n, eps):
    """Pairs in the closure: far pairs, pairs at distance ~eps, and boundary-anchored pairs."""
    k = n // 3
    far_x = dom.sample_inside(rng, k)
    far_y = dom.sample_inside(rng, k)
    near_x = dom.sample_inside(rng, k)
    step = rng.normal(size=(k, dom.dim)) * (eps * 10.0 ** rng.uniform(-1, 1, k))[:, None]
    near_y = project_to_boundary(dom, near_x + step)
    inside = dom.contains(near_x + step)
    near_y = np.where(inside[:, None], near_x + step, near_y)
    m = n - 2 * k
    bx = dom.sample_boundary(rng, m)
    by = dom.sample_inside(rng, m)
    x = np.concatenate([far_x, near_x, bx])
    y = np.concatenate([far_y, near_y, by])
    return x, y


def boundary_pairs(dom, rng, n, eps, x_on_boundary=True):
    """x on the boundary and y in the closure (or the roles swapped), mixing near and far partners."""
    b = dom.sample_boundary(rng, n)
    other = dom.sample_inside(rng, n)
    half = n // 2
    jitter = rng.normal(size=(n - half, dom.dim)) * (eps * 10.0 ** rng.uniform(-1, 1.5, n - half))[:, None]
    near = b[half:] + jitter
    near = np.where(dom.contains(near)[:, None], near, project_to_boundary(dom, near))
    other[half:] = near
    return (b, other) if x_on_boundary else (other, b)


def _fd_inward(fun, p, direction, h=1e-5):
    """Second-order one-sided derivative of fun at p along direction (into the domain)."""
    f0 = fun(p)
    f1 = fun(p + h * direction)
    f2 = fun(p + 2 * h * direction)
    return (-3.0 * f0 + 4.0 * f1 - f2) / (2 * h)


def boundary_directional(pf: PairFunction, t, x, y, which="x"):
    """Finite-difference grad_x f . n(x) (which='x') or grad_y f . n(y) (which='y') at boundary points."""
    if which == "x":
        n = boundary_normal(pf.domain, x)
        return _fd_inward(lambda p: pf(t, p, y), x, n)
    n = boundary_normal(pf.domain, y)
    return _fd_inward(lambda p: pf(t, x, p), y, n)


def fit_pair_constants(pf: PairFunction, n_samples=10_000, seed=0, eps_values=(1e-1, 1e-2, 1e-3),
                       times=None, safety_M6=1.25, safety_M7=0.8):
    """Fit M6 and M7 on a training sample across several eps.

    M6 dominates the omega derivative ratios, the upper sandwich ratio and
    both boundary ratios; M7 is below the lower sandwich ratio.  The safety
    factors leave room for held-out samples.
    """
    rng = np.random.default_rng(seed)
    dom = pf.domain
    T = pf.tr.T
    times = [0.0, 0.5 * T] if times is None else list(times)
    upper, lower = [0.0], [np.inf]
    per_eps = max(1, n_samples // (len(eps_values) * len(times)))
    for eps in eps_values:
        q = pf.with_eps(eps)
        for t in times:
            x, y = sample_pairs(dom, rng, per_eps, eps)
            f = q(t, x, y)
            d2 = np.sum((x - y) ** 2, axis=1)
            keep = d2 > 0
            upper.append(float(np.max((f[keep] - eps) * eps / d2[keep])))
            lower.append(float(np.min(f[keep] * eps / d2[keep])))
            for which in ("x", "y"):
                bx, by = boundary_pairs(dom, rng, per_eps, eps, x_on_boundary=(which == "x"))
                der = boundary_directional(q, t, bx, by, which)
                d2 = np.sum((bx - by) ** 2, axis=1)
                ok = d2 > 1e-24
                upper.append(float(np.max(der[ok] * eps / d2[ok], initial=0.0)))
    rho, xi = pf.omega.g.sample(rng, n_samples, dom.dim)
    fam = pf.omega.bound_ratios(rho, xi)
    upper.append(max(float(v.max()) for v in fam.values()))
    M6 = safety_M6 * max(upper)
    M7 = safety_M7 * min(lower)
    return {"M6": float(M6), "M7": float(M7), "max_ratio": float(max(upper)), "min_ratio": float(min(lower))}


def sandwich_check(pf: PairFunction, M6, M7, n_samples=10_000, seed=1, t=None):
    """M7 |x-y|^2 / eps <= f_eps <= eps + M6 |x-y|^2 / eps on fresh pairs."""
    rng = np.random.default_rng(seed)
    t = 0.5 * pf.tr.T if t is None else t
    x, y = sample_pairs(pf.domain, rng, n_samples, pf.eps)
    f = pf(t, x, y)
    d2 = np.sum((x - y) ** 2, axis=1)
    lo = f - M7 * d2 / pf.eps
    hi = pf.eps + M6 * d2 / pf.eps - f
    scale = 1e-12 * np.maximum(1.0, np.abs(f))
    return {
        "checked": int(len(f)),
        "lower_violations": int(np.sum(lo < -scale)),
        "upper_violations": int(np.sum(hi < -scale)),
        "min_lower_margin": float(lo.min()),
        "min_upper_margin": float(hi.min()),
        "pass": bool(np.all(lo >= -scale) and np.all(hi >= -scale)),
    }


def boundary_derivative_checks(pf: PairFunction, samples=None, M6=None, n_samples=1000, seed=2, t=None,
                               tol=1e-6):
    """Finite-difference check of grad_x f . n(x) and grad_y f . n(y) at boundary points.

    ``samples`` maps 'x' and 'y' to (x, y) arrays with the named point on the
    boundary.  With M6 unset it is fitted as the largest observed ratio.
    """
    rng = np.random.default_rng(seed)
    t = 0.5 * pf.tr.T if t is None else t
    if samples is None:
        samples = {w: boundary_pairs(pf.domain, rng, n_samples, pf.eps, x_on_boundary=(w == "x"))
                   for w in ("x", "y")}
    ders, d2s = {}, {}
    for which, (x, y) in samples.items():
        ders[which] = boundary_directional(pf, t, x, y, which)
        d2s[which] = np.sum((x - y) ** 2, axis=1)
    fitted = M6 is None
    if fitted:
        ratios = [np.max(ders[w][d2s[w] > 0] * pf.eps / d2s[w][d2s[w] > 0], initial=0.0) for w in ders]
        M6 = float(max(ratios))
    report = {"M6": float(M6), "fitted": fitted}
    ok = True
    for which in ders:
        margin = M6 * d2s[which] / pf.eps + tol - ders[which]
        v = int(np.sum(margin < 0))
        ok &= v == 0
        report[which] = {"checked": int(len(margin)), "violations": v, "min_margin": float(margin.min()),
                         "max_derivative": float(ders[which].max())}
    report["pass"] = bool(ok)
    return report


# -- local h and the global boundary function -------------------------------------------------------


@dataclass
class BumpProfile:
    """u0(y) = (1 - |w|^2 / radius^2)^3 with w the hyperplane coordinate of y - z."""

    z: np.ndarray
    normal: np.ndarray
    radius: float

    def _w(self, y):
        d = np.atleast_2d(y) - self.z
        return d - np.outer(d @ self.normal, self.normal)

    def __call__(self, y):
        q = np.sum(self._w(y) ** 2, axis=1) / self.radius**2
        return np.where(q < 1.0, (1.0 - np.minimum(q, 1.0)) ** 3, 0.0)

    def gradient(self, y):
        w = self._w(y)
        q = np.sum(w**2, axis=1) / self.radius**2
        fac = np.where(q < 1.0, -6.0 * (1.0 - np.minimum(q, 1.0)) ** 2 / self.radius**2, 0.0)
        return fac[:, None] * w


@dataclass
class Patch:
    """One term h * chi1 * chi2 of H around the image-boundary point (t0, z0)."""

    chart: LocalChart
    bump: BumpProfile
    kappa: float
    offset: float
    normal_z0: np.ndarray
    t_half: float | None = None  # time factor is 1 for |t - t0| <= t_half, 0 beyond 2 t_half
    annulus_violations: int = 0

    @property
    def radius(self):
        return self.chart.delta5

    def time_factor(self, t):
        if self.t_half is None:
            return 1.0, 0.0
        s = (abs(t - self.chart.t0) - self.t_half) / self.t_half
        val = 1.0 - float(smoothstep5(s))
        der = -float(smoothstep5_deriv(s)) * np.sign(t - self.chart.t0) / self.t_half
        return val, der


def _patch_terms(direction: DirectionField, patches, t, x, owner, want_dt=False, max_step=None):
    """Values, gradients and time derivatives of h, chi1 and chi2 for rows (x[k], patches[owner[k]])."""
    n, d = x.shape
    z = np.array([patches[j].chart.z for j in owner]).reshape(n, d)
    g0 = np.array([patches[j].chart.gamma0 for j in owner]).reshape(n, d)
    rho1 = max(p.chart.rho1 for p in patches)
    if max_step is None:
        max_step = min(1e-2, min(p.radius for p in patches) / 4)
    rec = hitting_time(direction, t, x, patches[0].chart.t0, z, rho1, max_step=max_step, with_lam=want_dt,
                       normal=g0)
    Y = rec.state.y
    h = np.zeros(n)
    gh = np.zeros((n, d))
    th = np.zeros(n)
    ok = rec.defined
    if np.any(ok):
        gam = direction(t, Y[ok])
        for j in np.unique(owner[ok]):
            rows = np.nonzero(ok & (owner == j))[0]
            sub = np.searchsorted(np.nonzero(ok)[0], rows)
            bump = patches[j].bump
            h[rows] = bump(Y[rows])
            du = bump.gradient(Y[rows])
            dY = rec.state.psi[rows] + rec.grad[rows][:, :, None] * gam[sub][:, None, :]
            gh[rows] = np.einsum("nij,nj->ni", dY, du)
            if want_dt:
                dYt = rec.state.lam[rows] + rec.dt[rows][:, None] * gam[sub]
                th[rows] = np.sum(dYt * du, axis=1)
    chi = np.zeros(n)
    gchi = np.zeros((n, d))
    tchi = np.zeros(n)
    chi2 = np.zeros(n)
    nz0 = np.zeros((n, d))
    for j in np.unique(owner):
        rows = owner == j
        p = patches[j]
        w = x[rows] - p.chart.z
        dist = np.linalg.norm(w, axis=1)
        inner, outer = p.kappa * p.radius, p.radius
        s = (dist - inner) / (outer - inner)
        space = 1.0 - smoothstep5(s)
        dspace = -smoothstep5_deriv(s) / (outer - inner)
        unit = w / np.where(dist > 0, dist, 1.0)[:, None]
        tf, dtf = p.time_factor(t)
        chi[rows] = space * tf
        gchi[rows] = (dspace * tf)[:, None] * unit
        tchi[rows] = space * dtf
        chi2[rows] = (x[rows] - p.chart.z0) @ p.normal_z0 + p.offset
        nz0[rows] = p.normal_z0
    return {"h": h, "grad_h": gh, "dt_h": th, "chi1": chi, "grad_chi1": gchi, "dt_chi1": tchi,
            "chi2": chi2, "grad_chi2": nz0, "record": rec}


class LocalH:
    """h(t, x) = u0(y(t, x, Gamma(t, x))) for one patch; zero where the hitting time is undefined."""

    def __init__(self, direction: DirectionField, patch: Patch):
        self.direction = direction
        self.patch = patch

    def terms(self, t, x, want_dt=False):
        x, _ = as_points(x, self.direction.dim)
        return _patch_terms(self.direction, [self.patch], t, x, np.zeros(len(x), dtype=int), want_dt)

    def __call__(self, t, x):
        return self.terms(t, x)["h"]

    def gradient(self, t, x):
        return self.terms(t, x)["grad_h"]


class GlobalBoundaryFunction:
    """H(t, x) = scale * sum over patches of h * chi1 * chi2."""

    def __init__(self, direction: DirectionField, patches, scale=1.0, report=None):
        self.direction = direction
        self.patches = list(patches)
        self.scale = float(scale)
        self.report = report or {}
        self.dim = direction.dim
        self._centres = np.array([p.chart.z for p in self.patches])
        self._radii = np.array([p.radius for p in self.patches])
        self._tree = cKDTree(self._centres) if self.patches else None
        self._radius = max((p.radius for p in self.patches), default=0.0)

    def _rows(self, t, x):
        lists = self._tree.query_ball_point(x, self._radius)
        lens = np.array([len(c) for c in lists], dtype=int)
        idx = np.repeat(np.arange(len(x)), lens)
        own = np.fromiter(itertools.chain.from_iterable(lists), dtype=int, count=int(lens.sum()))
        if idx.size == 0:
            return idx, own
        keep = (np.linalg.norm(x[idx] - self._centres[own], axis=1) < self._radii[own]) & self._live(t)[own]
        return idx[keep], own[keep]

    def _live(self, t):
        return np.array([p.time_factor(t)[0] > 0 for p in self.patches], dtype=bool)

    def evaluate(self, t, x, want_grad=True, want_dt=False):
        """Returns (H, grad H, d_t H); entries not requested are None."""
        x, _ = as_points(x, self.dim)
        n = len(x)
        val = np.zeros(n)
        grad = np.zeros((n, self.dim)) if want_grad else None
        dt = np.zeros(n) if want_dt else None
        if self._tree is None or n == 0:
            return val, grad, dt
        idx, owner = self._rows(t, x)
        if idx.size == 0:
            return val, grad, dt
        T = _patch_terms(self.direction, self.patches, t, x[idx], owner, want_dt)
        h, c1, c2 = T["h"], T["chi1"], T["chi2"]
        np.add.at(val, idx, self.scale * h * c1 * c2)
        if want_grad:
            g = (T["grad_h"] * (c1 * c2)[:, None] + T["grad_chi1"] * (h * c2)[:, None]
                 + T["grad_chi2"] * (h * c1)[:, None])
            np.add.at(grad, idx, self.scale * g)
        if want_dt:
            np.add.at(dt, idx, self.scale * (T["dt_h"] * c1 * c2 + h * T["dt_chi1"] * c2))
        return val, grad, dt

    def __call__(self, t, x):
        return self.evaluate(t, x, want_grad=False)[0]

    def grad(self, t, x):
        return self.evaluate(t, x)[1]

    def hessian(self, t, x, step=1e-5):
        """Central differences of the gradient, shape (N, d, d)."""
        x, _ = as_points(x, self.dim)
        out = np.empty((len(x), self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = step
            out[:, :, k] = (self.grad(t, x + e) - self.grad(t, x - e)) / (2 * step)
        return 0.5 * (out + np.transpose(out, (0, 2, 1)))

    def boundary_margin(self, t, x_boundary):
        """grad H . gamma at the image points u(t, x_boundary)."""
        y = self.direction.tr(t, x_boundary)
        g = self.direction(t, y)
        return np.sum(self.grad(t, y) * g, axis=1)


def make_patches(direction: DirectionField, t0, x_boundary, delta5, bump_radius, kappa, theta0, theta1,
                 t_half=None, rho1=None):
    """Patches anchored at z0 = u(t0, x) for boundary points x; each z is reached by flowing delta5 / 2 from z0."""
    rho1 = 2.0 * delta5 if rho1 is None else rho1
    xb, _ = as_points(x_boundary, direction.dim)
    z0 = direction.tr(t0, xb)
    st = flow(direction, t0, z0, 0.5 * delta5, max_step=min(1e-2, delta5 / 4), with_psi=False)
    z = st.y
    g = direction(t0, z)
    g_z0 = direction(t0, z0)
    out = []
    for k in range(len(xb)):
        chart = LocalChart(t0, z0[k], z[k], g[k], np.nan, np.nan, delta5, np.nan, rho1, theta0, theta1)
        offset = float(np.linalg.norm(z[k] - z0[k]) + delta5 + 1.0)
        out.append(Patch(chart, BumpProfile(z[k], g[k], bump_radius), kappa, offset, g_z0[k], t_half))
    return out


def make_patch(direction: DirectionField, t0, x_boundary, delta5, bump_radius, kappa, theta0, theta1,
               t_half=None, rho1=None):
    return make_patches(direction, t0, np.atleast_2d(x_boundary), delta5, bump_radius, kappa, theta0, theta1,
                        t_half, rho1)[0]


def _ball_rows(centres, radius, pts):
    """(point index, centre index) pairs with |pt - centre| < radius."""
    lists = cKDTree(centres).query_ball_point(pts, radius)
    idx = np.array([i for i, c in enumerate(lists) for _ in c], dtype=int)
    own = np.array([j for c in lists for j in c], dtype=int)
    if idx.size:
        keep = np.linalg.norm(pts[idx] - centres[own], axis=1) < radius
        idx, own = idx[keep], own[keep]
    return idx, own


def _is_time_constant(tr: ZvonkinTransform):
    return bool(holder_estimate(tr.field, n_points=64)[2])


def _boundary_perimeter(dom):
    if dom.dim == 1:
        return 0.0
    pts = dom.boundary_points(4096)
    return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))


def _n_boundary(dom, spacing):
    if dom.dim == 1:
        return 2
    return max(8, int(np.ceil(_boundary_perimeter(dom) / spacing)))


def build_H(direction: DirectionField, ledger: ConstantsLedger, delta5=None, bump_radius=None, eta3=None,
            kappa=None, cover_level=0.25, safety=1.05, dense_factor=None, max_patches=10_000):
    """Greedy patch cover of the image boundary, rescaled so grad H . gamma >= safety on dense samples.

    Defaults follow the ledger: delta5, kappa and eta3 when present, and a
    bump radius of delta5 tan(theta1).  A boundary sample counts as covered
    once some patch has h >= cover_level and chi1 = 1 there.
    """
    tr = direction.tr
    dom = direction.domain
    theta0, theta1 = ledger.require("theta0", "theta1")
    delta5 = ledger.require("delta5")[0] if delta5 is None else delta5
    if kappa is None:
        kappa = ledger.get("kappa") or solve_kappa(theta1, theta0)
    if bump_radius is None:
        bump_radius = delta5 * np.tan(theta1)
    T = tr.T
    constant = _is_time_constant(tr)
    if constant:
        centres = [0.5 * T]
        t_half = None
    else:
        eta3 = ledger.get("eta3", T / 8) if eta3 is None else eta3
        centres = list(np.arange(0.0, T + 1e-12, eta3 / 2))
        t_half = eta3 / 2
    n_b = _n_boundary(dom, delta5 / 4)
    base = dom.boundary_points(n_b)
    # samples covered by one bump at cover_level, used to space the first round of anchors
    reach = bump_radius * np.sqrt(1.0 - cover_level ** (1.0 / 3.0))
    stride = max(1, int(2 * reach / (delta5 / 4)))
    patches = []
    for t0 in centres:
        pts = tr(t0, base)
        covered = np.zeros(n_b, dtype=bool)
        rnd = 0
        while not covered.all():
            todo = np.nonzero(~covered)[0]
            anchors = todo[:: max(1, stride >> rnd)]
            rnd += 1
            if len(patches) + len(anchors) > max_patches:
                raise CoverFailure(f"{max_patches} patches do not cover the image boundary")
            new = make_patches(direction, t0, base[anchors], delta5, bump_radius, kappa, theta0, theta1, t_half)
            idx, own = _ball_rows(np.array([p.chart.z for p in new]), delta5, pts)
            if idx.size:
                terms = _patch_terms(direction, new, t0, pts[idx], own)
                dist = np.linalg.norm(pts[idx] - np.array([new[j].chart.z for j in own]), axis=1)
                hit = idx[(terms["h"] >= cover_level) & (dist <= kappa * delta5)]
                covered[hit] = True
            covered[anchors] = True
            patches.extend(new)
    # annulus separation and the rescaling on a denser boundary sample
    if dense_factor is None:
        dense_factor = 8 if constant else 4
    dense = dom.boundary_points(_n_boundary(dom, delta5 / (4 * dense_factor)))
    H = GlobalBoundaryFunction(direction, patches, 1.0)
    centres_all = np.array([p.chart.z for p in patches])
    margins = []
    annulus_total = 0
    times = centres if constant else sorted(set(centres) | {min(T, c + eta3 / 4) for c in centres})
    for t in times:
        y = tr(t, dense)
        # the annulus condition is stated at each patch's own anchor time
        anchored = np.nonzero([p.chart.t0 == t for p in patches])[0]
        if anchored.size:
            idx, own = _ball_rows(centres_all[anchored], delta5, y)
            own = anchored[own]
            dist = np.linalg.norm(y[idx] - centres_all[own], axis=1)
            ring = dist > np.array([patches[j].kappa * patches[j].radius for j in own])
            if np.any(ring):
                hv = _patch_terms(direction, patches, t, y[idx[ring]], own[ring])["h"]
                for j in own[ring][hv > 0]:
                    patches[j].annulus_violations += 1
                annulus_total += int(np.sum(hv > 0))
        margins.append(H.boundary_margin(t, dense))
    margins = np.concatenate(margins)
    low = float(margins.min())
    if not low > 0:
        raise CoverFailure(f"grad H . gamma is not positive on the boundary (min {low:.3e})")
    H.scale = safety / low
    H.report = {
        "patches": len(patches),
        "time_windows": len(centres),
        "time_constant": constant,
        "delta5": float(delta5),
        "bump_radius": float(bump_radius),
        "kappa": float(kappa),
        "eta3": None if constant else float(eta3),
        "annulus_violations": annulus_total,
        "raw_min_margin": low,
        "scale": H.scale,
        "training_points": int(margins.size),
    }
    return H


def verify_H(H: GlobalBoundaryFunction, n_samples=1000, seed=11, tol=1e-3):
    """grad H . gamma >= 1 - tol on fresh boundary samples at fresh times, and H >= 0 nearby."""
    rng = np.random.default_rng(seed)
    dom = H.direction.domain
    T = H.direction.tr.T
    times = rng.uniform(0.0, T, 4)
    per = max(1, n_samples // len(times))
    margins, values = [], []
    for t in times:
        xb = dom.sample_boundary(rng, per)
        margins.append(H.boundary_margin(t, xb))
        probe = H.direction.tr(t, dom.sample_tube(rng, per, 0.1 * dom.delta0))
        values.append(H(t, probe))
    margins = np.concatenate(margins)
    values = np.concatenate(values)
    return {
        "checked": int(margins.size),
        "min_margin": float(margins.min()),
        "violations": int(np.sum(margins < 1.0 - tol)),
        "min_value": float(values.min()),
        "negative_values": int(np.sum(values < 0)),
        "pass": bool(np.all(margins >= 1.0 - tol) and np.all(values >= 0)),
    }


def characteristic_residual(direction: DirectionField, patch: Patch, n_points=100, seed=5, fd=1e-6):
    """|grad h . gamma| at points of the patch ball with h > 0, plus a finite-difference gradient check."""
    rng = np.random.default_rng(seed)
    lh = LocalH(direction, patch)
    c = patch.chart
    pts = []
    while sum(len(p) for p in pts) < n_points:
        v = rng.normal(size=(4 * n_points, direction.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cand = c.z + v * (c.delta5 * rng.random(len(v)) ** (1.0 / direction.dim))[:, None]
        cand = cand[np.linalg.norm(cand - c.z, axis=1) < 0.9 * c.delta5]
        pts.append(cand[lh(c.t0, cand) > 1e-3])
    x = np.concatenate(pts)[:n_points]
    T = lh.terms(c.t0, x)
    grad = T["grad_h"]
    gam = direction(c.t0, x)
    resid = np.abs(np.sum(grad * gam, axis=1))
    fd_grad = np.empty_like(grad)
    for k in range(direction.dim):
        e = np.zeros(direction.dim)
        e[k] = fd
        fd_grad[:, k] = (lh(c.t0, x + e) - lh(c.t0, x - e)) / (2 * fd)
    gnorm = np.max(np.linalg.norm(grad, axis=1))
    return {
        "points": int(len(x)),
        "max_residual": float(resid.max()),
        "grad_scale": float(gnorm),
        "fd_rel_error": float(np.max(np.abs(fd_grad - grad)) / max(gnorm, 1e-300)),
        "pass": bool(resid.max() < 1e-3 * max(gnorm, 1e-300)),
    }


def support_check(direction: DirectionField, patch: Patch, n_samples=10_000, seed=6, times=None):
    """Points of B(z, delta5) with h > 0 must lie in the cone region C(z, delta5) of width 2 * bump radius."""
    rng = np.random.default_rng(seed)
    c = patch.chart
    lh = LocalH(direction, patch)
    theta = np.arctan(patch.bump.radius / c.delta5)
    times = [c.t0] if times is None else times
    per = n_samples // len(times)
    checked = violations = 0
    for t in times:
        v = rng.normal(size=(per, direction.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        x = c.z + v * (c.delta5 * rng.random(per) ** (1.0 / direction.dim))[:, None]
        h = lh(t, x)
        inside = cone_Cz_contains(c, x, theta=theta)
        violations += int(np.sum((h > 0) & ~inside))
        checked += per
    return {"checked": checked, "violations": violations, "pass": violations == 0}
