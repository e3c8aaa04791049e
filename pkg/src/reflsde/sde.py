"""Euler schemes for the reflected SDE dX = dW + b(t, X) dt + n(X) d|L| and diagnostics on their paths.

Brownian increments come from a counter-based generator keyed by
(seed, path index) with one counter block per refinement level, so any
subset of paths at any resolution is reproducible on its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StepTooLarge
from .fields import DriftField, norm_Lp_spacetime
from .geometry import DomainSpec, as_points, boundary_normal, project_to_boundary, signed_distance

SCHEMES = ("projection", "penalization")


class BrownianPath:
    """Increments of n_paths independent d-dimensional Brownian motions on [0, T].

    Level 0 has step ``base_dt``; level k halves it k times by Brownian-bridge
    midpoint sampling, so two consecutive fine increments always add up to
    the coarse one.
    """

    def __init__(self, seed, T, base_dt, dim, n_paths, first_path=0):
        steps = T / base_dt
        if abs(steps - round(steps)) > 1e-9 or steps < 1:
            raise DomainError("T must be a positive multiple of base_dt")
        self.seed = int(seed)
        self.T = float(T)
        self.base_dt = float(base_dt)
        self.dim = int(dim)
        self.n_paths = int(n_paths)
        self.first_path = int(first_path)
        self.base_steps = int(round(steps))
        self._cache = {}

    def _normals(self, path, level, count):
        bitgen = np.random.Philox(key=[self.seed & (2**64 - 1), path], counter=[0, 0, 0, level])
        return np.random.Generator(bitgen).standard_normal(count)

    def _draw(self, level, count):
        out = np.empty((count, self.n_paths))
        for k in range(self.n_paths):
            out[:, k] = self._normals(self.first_path + k, level, count)
        return out

    def dt(self, level):
        return self.base_dt / 2**level

    def n_steps(self, level):
        return self.base_steps * 2**level

    def increments(self, level=0):
        """Array of shape (n_steps(level), n_paths, dim)."""
        if level in self._cache:
            return self._cache[level]
        if level == 0:
            z = self._draw(0, self.base_steps * self.dim)
            inc = np.sqrt(self.base_dt) * z.reshape(self.base_steps, self.dim, self.n_paths).transpose(0, 2, 1)
        else:
            coarse = self.increments(level - 1)
            n = coarse.shape[0]
            z = self._draw(level, n * self.dim).reshape(n, self.dim, self.n_paths).transpose(0, 2, 1)
            dev = np.sqrt(self.dt(level) / 2.0) * z
            inc = np.empty((2 * n, self.n_paths, self.dim))
            inc[0::2] = 0.5 * coarse + dev
            inc[1::2] = coarse - inc[0::2]
        self._cache[level] = inc
        return inc

    def level_for(self, dt):
        level = np.log2(self.base_dt / dt)
        if abs(level - round(level)) > 1e-9 or level < -1e-9:
            raise DomainError(f"dt={dt} is not a dyadic refinement of base_dt={self.base_dt}")
        return int(round(level))


@dataclass
class ReflectedPath:
    """A batch of discretized reflected paths.

    ``X[k]`` is the state after step k; ``X_pre[k]`` the unconstrained point of
    step k; ``dL[k]`` the pushing increment and ``dLtot[k]`` its length, so
    that ``local_time`` is the running sum of ``dLtot``.
    """

    times: np.ndarray
    X: np.ndarray
    X_pre: np.ndarray
    dW: np.ndarray
    drift: np.ndarray
    dL: np.ndarray
    dLtot: np.ndarray
    normals: np.ndarray
    scheme: str
    penalty: float | None = None
    slack: float = 0.0

    @property
    def local_time(self):
        return np.concatenate([np.zeros((1, self.X.shape[1])), np.cumsum(self.dLtot, axis=0)])

    @property
    def reflections(self):
        return np.sum(self.dLtot > 0, axis=0)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def summary_rows(self):
        lt = self.local_time[-1]
        refl = self.reflections
        return [[k, *self.X[-1, k].tolist(), float(lt[k]), int(refl[k])] for k in range(self.X.shape[1])]


def _start(x0, n_paths, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = as_points(x0, dim)[0]
        x0 = np.repeat(x0, n_paths, axis=0)
    if x0.shape != (n_paths, dim):
        raise DomainError(f"x0 must be one point or {n_paths} points")
    return x0.copy()


def _check_exit(dom: DomainSpec, pre, max_exit):
    if max_exit is None:
        return
    depth = -signed_distance(dom, pre)
    if np.any(depth > max_exit):
        raise StepTooLarge(f"a step left the closure by {depth.max():.3e} > {max_exit:.3e}")


def simulate_reflected(scheme, drift: DriftField, x0, T, path: BrownianPath, dt=None, substeps=1,
                       penalty=None, max_exit=None):
    """Projection or penalization Euler scheme on [0, T] with step dt / substeps.

    projection:   X* = X + b(t, X) dt + dW, X+ = nearest point of the closure.
    penalization: X+ = X + b(t, X) dt + dW + kappa dt (proj(X) - X), with the
                  push evaluated at the left endpoint; states may sit outside
                  the closure by at most one step (reported as ``slack``).

    The drift is evaluated at the left endpoint.  ``max_exit`` bounds how far
    an unconstrained point may leave the closure (StepTooLarge beyond it);
    nearest-point projection onto the convex presets is unique at any
    distance, so the default is no bound.
    """
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme '{scheme}'")
    dom = drift.domain
    dt = path.base_dt if dt is None else dt
    level = path.level_for(dt / substeps)
    h = dt / substeps
    inc = path.increments(level)
    n_steps = int(round(T / h))
    if n_steps > inc.shape[0] or abs(n_steps * h - T) > 1e-9:
        raise DomainError("path horizon is shorter than T or T is not a multiple of the step")
    n = path.n_paths
    d = dom.dim
    X = np.empty((n_steps + 1, n, d))
    X[0] = _start(x0, n, d)
    if not np.all(dom.contains(X[0], tol=1e-12)):
        raise DomainError("x0 must lie in the closed domain")
    pre = np.empty((n_steps, n, d))
    bvals = np.empty((n_steps, n, d))
    dL = np.zeros((n_steps, n, d))
    normals = np.zeros((n_steps, n, d))
    kappa = 1.0 / h if penalty is None else float(penalty)
    slack = 0.0
    for k in range(n_steps):
        t = k * h
        x = X[k]
        b = drift(t, x)
        bvals[k] = b
        step = x + b * h + inc[k]
        if scheme == "projection":
            pre[k] = step
            _check_exit(dom, step, max_exit)
            out = ~dom.contains(step)
            nxt = step.copy()
            if np.any(out):
                nxt[out] = project_to_boundary(dom, step[out])
                normals[k, out] = boundary_normal(dom, nxt[out])
            dL[k] = nxt - step
        else:
            out = ~dom.contains(x)
            push = np.zeros_like(x)
            if np.any(out):
                foot = project_to_boundary(dom, x[out])
                push[out] = kappa * h * (foot - x[out])
                normals[k, out] = boundary_normal(dom, foot)
            pre[k] = step
            nxt = step + push
            dL[k] = push
            slack = max(slack, float(np.max(-signed_distance(dom, nxt), initial=0.0)))
        X[k + 1] = nxt
    times = np.arange(n_steps + 1) * h
    return ReflectedPath(times, X, pre, inc[:n_steps], bvals, dL, np.linalg.norm(dL, axis=2), normals, scheme,
                         kappa if scheme == "penalization" else None, slack)


def simulate_transformed(tr, x0, T, path: BrownianPath, dt=None, substeps=1, max_exit=None):
    """Scheme on the transformed process Y = u(t, X).

    Y* = Y + D_x u(t, X) dW; X* = u^{-1}(t + dt, Y*); if X* leaves the closure
    it is projected and Y is reset to u(t + dt, X+).  The drift never enters:
    it is absorbed by the transform.  Where the inverse is undefined (the
    unconstrained point leaves the tube) X* = X + dW is used.
    """
    dom = tr.domain
    if T > tr.T + 1e-12:
        raise DomainError("horizon exceeds the transform horizon")
    dt = path.base_dt if dt is None else dt
    level = path.level_for(dt / substeps)
    h = dt / substeps
    inc = path.increments(level)
    n_steps = int(round(T / h))
    n, d = path.n_paths, dom.dim
    X = np.empty((n_steps + 1, n, d))
    X[0] = _start(x0, n, d)
    pre = np.empty((n_steps, n, d))
    dL = np.zeros((n_steps, n, d))
    normals = np.zeros((n_steps, n, d))
    for k in range(n_steps):
        t = k * h
        x = X[k]
        J = tr.jacobian(t, x)
        y_star = tr(t, x) + np.einsum("nij,nj->ni", J, inc[k])
        x_star = tr.invert(min(t + h, tr.T), y_star, x0=x + inc[k], strict=False)
        bad = np.isnan(x_star).any(axis=1)
        x_star[bad] = x[bad] + inc[k][bad]
        pre[k] = x_star
        _check_exit(dom, x_star, max_exit)
        nxt = x_star.copy()
        out = ~dom.contains(x_star)
        if np.any(out):
            nxt[out] = project_to_boundary(dom, x_star[out])
            normals[k, out] = boundary_normal(dom, nxt[out])
        dL[k] = nxt - x_star
        X[k + 1] = nxt
    times = np.arange(n_steps + 1) * h
    return ReflectedPath(times, X, pre, inc[:n_steps], np.zeros_like(pre), dL, np.linalg.norm(dL, axis=2), normals,
                         "transformed")


def reflection_angles(rp: ReflectedPath):
    """Angle between each nonzero pushing increment and the normal it is meant to follow."""
    mask = rp.dLtot > 0
    if not np.any(mask):
        return np.zeros(0)
    v = rp.dL[mask] / rp.dLtot[mask][:, None]
    n = rp.normals[mask]
    c = np.sum(v * n, axis=1)
    # atan2 of the orthogonal part keeps small angles resolved below sqrt(eps)
    return np.arctan2(np.linalg.norm(v - c[:, None] * n, axis=1), c)


# -- generalized Ito formula ----------------------------------------------------------------------


@dataclass
class ScalarField:
    """F(t, x) with its derivatives; every callable takes (t, pts)."""

    value: callable
    grad: callable
    laplacian: callable
    time_derivative: callable | None = None


def coordinate_field(i, dim):
    e = np.zeros(dim)
    e[i] = 1.0
    return ScalarField(
        lambda t, x: x[:, i].copy(),
        lambda t, x: np.broadcast_to(e, x.shape).copy(),
        lambda t, x: np.zeros(len(x)),
    )


def square_norm_field(dim):
    return ScalarField(
        lambda t, x: np.sum(x * x, axis=1),
        lambda t, x: 2.0 * x,
        lambda t, x: np.full(len(x), 2.0 * dim),
    )


def constant_field(c=1.0):
    return ScalarField(
        lambda t, x: np.full(len(x), float(c)),
        lambda t, x: np.zeros_like(x),
        lambda t, x: np.zeros(len(x)),
    )


def ito_residual(F: ScalarField, rp: ReflectedPath):
    """Per-path terminal residual of the discrete generalized Ito formula.

    F(T, X_T) - F(0, X_0) minus the sum over steps of
      d_t F dt (time midpoint),
      grad F(X_k) . dW (martingale),
      grad F(X_k + b dt / 2) . b dt (drift),
      1/2 Lap F(X_k) dt,
      grad F(midpoint of X*, X+) . n |dL| (boundary).
    The drift and boundary terms use midpoint rules, exact for quadratic F,
    so the per-step residual is a centred martingale difference.
    """
    h = rp.dt
    total = F.value(rp.times[-1], rp.X[-1]) - F.value(0.0, rp.X[0])
    for k in range(len(rp.times) - 1):
        t = rp.times[k]
        x = rp.X[k]
        total -= np.sum(F.grad(t, x) * rp.dW[k], axis=1)
        b = rp.drift[k]
        total -= np.sum(F.grad(t, x + 0.5 * h * b) * b, axis=1) * h
        total -= 0.5 * F.laplacian(t, x) * h
        if F.time_derivative is not None:
            total -= F.time_derivative(t + 0.5 * h, x) * h
        refl = rp.dLtot[k] > 0
        if np.any(refl):
            mid = 0.5 * (rp.X_pre[k][refl] + rp.X[k + 1][refl])
            g = F.grad(t + h, mid)
            total[refl] -= np.sum(g * rp.normals[k][refl], axis=1) * rp.dLtot[k][refl]
    return total


def boundary_term(F: ScalarField, rp: ReflectedPath):
    """Per-path sum of grad F . n |dL| (the local-time part of the formula)."""
    h = rp.dt
    out = np.zeros(rp.X.shape[1])
    for k in range(len(rp.times) - 1):
        refl = rp.dLtot[k] > 0
        if np.any(refl):
            mid = 0.5 * (rp.X_pre[k][refl] + rp.X[k + 1][refl])
            out[refl] += np.sum(F.grad(rp.times[k] + h, mid) * rp.normals[k][refl], axis=1) * rp.dLtot[k][refl]
    return out


def mean_with_error(samples):
    samples = np.asarray(samples, dtype=float)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(len(samples)))


# -- Krylov estimate --------------------------------------------------------------------------------


def occupation_integral(rp: ReflectedPath, f):
    """Per-path left-point sum of |f(t_k, X_k)| dt."""
    h = rp.dt
    out = np.zeros(rp.X.shape[1])
    for k in range(len(rp.times) - 1):
        out += np.abs(f(rp.times[k], rp.X[k])) * h
    return out


def krylov_check(rp: ReflectedPath, f, domain: DomainSpec, p=None, x_breaks=(), m=32):
    """(E int |f(t, X_t)| dt, ||f||_{L^p((0,T) x D)}, ratio) with p = d + 1 by default."""
    p = domain.dim + 1 if p is None else p
    T = float(rp.times[-1])
    lhs = float(occupation_integral(rp, f).mean())
    rhs = norm_Lp_spacetime(f, p, domain, 0.0, T, m=m, x_breaks=x_breaks)
    ratio = lhs / rhs if rhs > 0 else 0.0
    return lhs, rhs, ratio


def slab_indicator(centre, width, axis=0):
    lo, hi = centre - 0.5 * width, centre + 0.5 * width

    def f(t, x):
        return ((x[:, axis] >= lo) & (x[:, axis] < hi)).astype(float)

    f.breaks = (lo, hi)
    return f


def krylov_family(rp: ReflectedPath, domain: DomainSpec, widths=(0.1, 0.05, 0.025), n_positions=9):
    """Fitted Krylov constant over slab indicators of shrinking width.

    M8(w) is the smallest constant valid for every slab of width >= w, so a
    Krylov-type bound means it stops growing as w shrinks. Per-width maxima
    and the f = 1 ratio are reported alongside.
    """
    lo, hi = domain.bbox()[0]
    one = lambda t, x: np.ones(len(x))  # noqa: E731
    base = krylov_check(rp, one, domain)
    rows = []
    best = 0.0
    M8 = {}
    per_width = {}
    for w in sorted(widths, reverse=True):
        centres = np.linspace(lo + 0.5 * w, hi - 0.5 * w, n_positions)
        ratios = []
        for c in centres:
            f = slab_indicator(c, w)
            lhs, rhs, ratio = krylov_check(rp, f, domain, x_breaks=f.breaks)
            ratios.append(ratio)
            rows.append({"width": float(w), "centre": float(c), "lhs": lhs, "rhs": rhs, "ratio": ratio})
        per_width[float(w)] = float(max(ratios))
        best = max(best, max(ratios))
        M8[float(w)] = float(best)
    vals = np.array(list(M8.values()))
    spread = float(vals.max() / vals.min() - 1.0) if vals.min() > 0 else float("inf")
    return {
        "constant_f": {"lhs": base[0], "rhs": base[1], "ratio": base[2]},
        "slabs": rows,
        "per_width_max": per_width,
        "M8": M8,
        "spread": spread,
        "pass": bool(np.all(np.isfinite(vals)) and spread < 0.25),
    }
