"""Drift presets, mollification, gridded space-time fields and L^p norms."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .errors import DomainError, OutsideTube, QuadratureFailure
from .geometry import DomainSpec, as_points, domain_from_dict, project_to_boundary, signed_distance

DRIFT_PRESETS = ("zero", "constant", "sign1d", "checkerboard2d", "radial_jump")


# -- drift fields ----------------------------------------------------------


class DriftField:
    """Bounded measurable drift b(t, x), zero outside the closed domain.

    Presets are time independent.  ``fn`` overrides the preset with an
    arbitrary vectorised callable ``fn(t, pts) -> (N, d)``.
    """

    def __init__(self, preset, domain: DomainSpec, bound=1.0, vector=None, mid=None,
                 cell=0.5, jump_radius=None, fn=None, time_dependent=False):
        if fn is None and preset not in DRIFT_PRESETS:
            raise DomainError(f"unknown drift preset '{preset}'")
        if preset == "checkerboard2d" and domain.dim != 2:
            raise DomainError("checkerboard2d needs a planar domain")
        if preset == "radial_jump" and domain.dim != 2:
            raise DomainError("radial_jump needs a planar domain")
        self.preset = preset
        self.domain = domain
        self.dim = domain.dim
        self.bound = float(bound)
        if vector is None:
            vector = np.zeros(self.dim)
            vector[0] = self.bound
        self.vector = np.asarray(vector, dtype=float).reshape(self.dim)
        if mid is None:
            mid = float(np.mean(domain.bbox()[0]))
        self.mid = float(mid)
        self.cell = float(cell)
        if jump_radius is None:
            jump_radius = 0.5 * float(np.max(np.abs(domain.bbox())))
        self.jump_radius = float(jump_radius)
        self.fn = fn
        self.time_dependent = bool(time_dependent)

    @property
    def discontinuous(self):
        return self.preset in ("sign1d", "checkerboard2d", "radial_jump") or self.fn is not None

    @property
    def sup_norm(self):
        if self.preset == "zero":
            return 0.0
        if self.preset == "constant":
            return float(np.linalg.norm(self.vector))
        return self.bound

    def raw(self, t, x):
        """Preset value without the zero extension outside the domain."""
        p, single = as_points(x, self.dim)
        if self.fn is not None:
            out = np.asarray(self.fn(t, p), dtype=float).reshape(p.shape)
        elif self.preset == "zero":
            out = np.zeros_like(p)
        elif self.preset == "constant":
            out = np.broadcast_to(self.vector, p.shape).copy()
        elif self.preset == "sign1d":
            out = np.zeros_like(p)
            out[:, 0] = self.bound * np.sign(p[:, 0] - self.mid)
        elif self.preset == "checkerboard2d":
            parity = np.floor(p[:, 0] / self.cell) + np.floor(p[:, 1] / self.cell)
            s = np.where(np.mod(parity, 2.0) == 0.0, 1.0, -1.0)
            out = (self.bound / np.sqrt(2.0)) * s[:, None] * np.ones_like(p)
        else:
            r = np.linalg.norm(p, axis=1)
            unit = p / np.where(r > 0, r, 1.0)[:, None]
            s = np.where(r < self.jump_radius, -1.0, 1.0)
            out = self.bound * s[:, None] * unit
        return out[0] if single else out

    def __call__(self, t, x):
        p, single = as_points(x, self.dim)
        out = self.raw(t, p)
        out = np.where((signed_distance(self.domain, p) >= 0.0)[:, None], out, 0.0)
        return out[0] if single else out

    def to_dict(self):
        return {
            "preset": self.preset,
            "bound": self.bound,
            "vector": self.vector.tolist(),
            "mid": self.mid,
            "cell": self.cell,
            "jump_radius": self.jump_radius,
        }


def make_drift(domain: DomainSpec, preset="zero", bound=1.0, **kwargs) -> DriftField:
    return DriftField(preset, domain, bound=bound, **kwargs)


# -- mollification ---------------------------------------------------------


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


class MollifierKernel:
    """Tensor product of the C^infinity bump exp(-1/(1-s^2)) on [-1, 1]."""

    def __init__(self):
        nodes, weights = np.polynomial.legendre.leggauss(400)
        self.norm1d = float(np.sum(weights * _bump(nodes)))

    def profile(self, s):
        """Normalised 1-D factor."""
        return _bump(s) / self.norm1d

    def __call__(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.prod(self.profile(z), axis=1)

    def scaled(self, n, z):
        """psi_n(z) = 2^{n k} psi(2^n z) for z in R^k."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        k = z.shape[1]
        return 2.0 ** (n * k) * self(2.0**n * z)

    def rule(self, m, k):
        """Tensor Gauss-Legendre rule for the kernel on [-1, 1]^k, weights summing to 1."""
        nodes, weights = np.polynomial.legendre.leggauss(m)
        w1 = weights * self.profile(nodes)
        w1 = w1 / w1.sum()
        grids = np.meshgrid(*([nodes] * k), indexing="ij")
        wgrids = np.meshgrid(*([w1] * k), indexing="ij")
        pts = np.column_stack([g.ravel() for g in grids])
        w = np.prod(np.column_stack([g.ravel() for g in wgrids]), axis=1)
        return pts, w


class MollifiedDrift(DriftField):
    """b_n = b * psi_n with b extended by zero outside the closed domain."""

    def __init__(self, base: DriftField, level: int, tol=1e-3, m_start=16, m_max=128):
        self.__dict__.update(base.__dict__)
        self.base = base
        self.level = int(level)
        self.tol = float(tol)
        self.m_start = int(m_start)
        self.m_max = int(m_max)
        self.kernel = MollifierKernel()

    @property
    def discontinuous(self):
        return False

    @property
    def sup_norm(self):
        return self.base.sup_norm

    def _apply(self, t, p, m):
        scale = 2.0 ** (-self.level)
        if self.base.time_dependent:
            nodes, w = self.kernel.rule(m, self.dim + 1)
            out = np.zeros_like(p)
            for node, wk in zip(nodes, w):
                out += wk * self.base(t - scale * node[0], p - scale * node[1:])
            return out
        nodes, w = self.kernel.rule(m, self.dim)
        out = np.zeros_like(p)
        for node, wk in zip(nodes, w):
            out += wk * self.base(t, p - scale * node)
        return out

    def __call__(self, t, x):
        p, single = as_points(x, self.dim)
        m = self.m_start
        coarse = self._apply(t, p, m)
        scale = max(self.base.sup_norm, 1e-300)
        while True:
            fine = self._apply(t, p, 2 * m)
            diff = np.sqrt(np.mean(np.sum((fine - coarse) ** 2, axis=1)))
            if diff <= self.tol * scale:
                out = fine
                break
            m *= 2
            if 2 * m > self.m_max:
                raise QuadratureFailure(
                    f"mollifier quadrature rms change {diff:.3e} above tolerance at {2 * m} nodes"
                )
            coarse = fine
        return out[0] if single else out

    raw = __call__

    def to_dict(self):
        out = self.base.to_dict()
        out["mollify_level"] = self.level
        return out


def mollify(drift: DriftField, level: int, **kwargs) -> MollifiedDrift:
    if level < 0:
        raise ValueError("mollification level must be non-negative")
    return MollifiedDrift(drift, level, **kwargs)


# -- gridded fields -------------------------------------------------------


@dataclass
class SpaceGrid:
    """Cell-centred solver grid including one ghost layer at the boundary.

    ``interval``: nodes x_j = a + (j - 1/2) h for j = 0..N+1 (ghosts at both ends).
    ``disk``: radii r_j = (j + 1/2) h for j = 0..N (ghost at j = N) and
    angles phi_k = -pi + (k + 1/2) dphi.
    """

    domain: DomainSpec
    h: float
    n_angle: int = 0

    def __post_init__(self):
        if self.domain.kind == "interval":
            a, b = self.domain.params
            n = int(round((b - a) / self.h))
            if not np.isclose(n * self.h, b - a, rtol=0, atol=1e-12):
                raise DomainError("interval length must be a multiple of h")
            self.n = n
            self.x = a + (np.arange(n + 2) - 0.5) * self.h
        elif self.domain.kind == "disk":
            R = self.domain.params[0]
            n = int(round(R / self.h))
            if not np.isclose(n * self.h, R, rtol=0, atol=1e-12):
                raise DomainError("disk radius must be a multiple of h")
            if self.n_angle <= 0:
                self.n_angle = min(256, 2 * int(round(np.pi * R / self.h)))
            if self.n_angle % 2:
                raise DomainError("angular resolution must be even")
            self.n = n
            self.r = (np.arange(n + 1) + 0.5) * self.h
            self.dphi = 2.0 * np.pi / self.n_angle
            self.phi = -np.pi + (np.arange(self.n_angle) + 0.5) * self.dphi
        else:
            raise DomainError("gridded solves support the interval and disk presets")

    @property
    def shape(self):
        if self.domain.kind == "interval":
            return (self.n + 2,)
        return (self.n + 1, self.n_angle)

    def nodes(self):
        """Cartesian coordinates of all stored nodes, flattened in C order."""
        if self.domain.kind == "interval":
            return self.x.reshape(-1, 1)
        rr, pp = np.meshgrid(self.r, self.phi, indexing="ij")
        return np.column_stack([(rr * np.cos(pp)).ravel(), (rr * np.sin(pp)).ravel()])

    def to_dict(self):
        return {"domain": self.domain.to_dict(), "h": self.h, "n_angle": self.n_angle}


class SpaceTimeVectorField:
    """Vector field sampled on a time grid times a :class:`SpaceGrid`.

    The displacement u(t, x) - x is cubic-spline interpolated in space and
    linear in time, so translations are reproduced exactly (and on the
    interval any affine data).  With
    ``extended=True`` points outside the domain (within the delta0 tube) use
    the even-reflection formula ``2 u(proj x) - u(2 proj x - x)``.
    """

    def __init__(self, times, grid: SpaceGrid, values, extended=False, fd_step=1e-5):
        self.times = np.asarray(times, dtype=float)
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.dim = grid.domain.dim
        expected = (len(self.times),) + grid.shape + (self.dim,)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} does not match {expected}")
        self.extended = extended
        self.fd_step = fd_step
        self._splines = {}
        self._nodes = grid.nodes().reshape(grid.shape + (self.dim,))

    @property
    def domain(self):
        return self.grid.domain

    def with_extension(self, extended=True):
        out = SpaceTimeVectorField(self.times, self.grid, self.values, extended, self.fd_step)
        out._splines = self._splines
        return out

    # spline construction per stored slice
    def _spline(self, k):
        sp = self._splines.get(k)
        if sp is not None:
            return sp
        vals = self.values[k] - self._nodes
        if self.domain.kind == "interval":
            sp = CubicSpline(self.grid.x, vals, axis=0)
        else:
            g = self.grid
            pad = 3
            half = g.n_angle // 2
            mirror = np.roll(vals[:pad][::-1], half, axis=1)
            v = np.concatenate([mirror, vals], axis=0)
            v = np.concatenate([v[:, -pad:], v, v[:, :pad]], axis=1)
            r = np.concatenate([-g.r[:pad][::-1], g.r])
            phi = np.concatenate([g.phi[-pad:] - 2 * np.pi, g.phi, g.phi[:pad] + 2 * np.pi])
            sp = [RectBivariateSpline(r, phi, v[:, :, c], kx=3, ky=3) for c in range(self.dim)]
        self._splines[k] = sp
        return sp

    def _eval_slice(self, k, p):
        sp = self._spline(k)
        if self.domain.kind == "interval":
            return p + sp(p[:, 0])
        r = np.linalg.norm(p, axis=1)
        phi = np.arctan2(p[:, 1], p[:, 0])
        return p + np.column_stack([s.ev(r, phi) for s in sp])

    def _time_weights(self, t):
        times = self.times
        span = times[-1] - times[0]
        tol = 1e-12 * max(1.0, abs(span))
        if t < times[0] - tol or t > times[-1] + tol:
            raise ValueError(f"time {t} outside field horizon [{times[0]}, {times[-1]}]")
        t = min(max(t, times[0]), times[-1])
        k = int(np.searchsorted(times, t, side="right") - 1)
        k = min(max(k, 0), len(times) - 2) if len(times) > 1 else 0
        if len(times) == 1:
            return 0, 0, 1.0
        lam = (t - times[k]) / (times[k + 1] - times[k])
        return k, k + 1, 1.0 - lam

    def _eval_inside(self, t, p):
        k0, k1, w0 = self._time_weights(t)
        out = self._eval_slice(k0, p)
        if w0 < 1.0:
            out = w0 * out + (1.0 - w0) * self._eval_slice(k1, p)
        return out

    def __call__(self, t, x):
        p, single = as_points(x, self.dim)
        if not self.extended:
            out = self._eval_inside(t, p)
            return out[0] if single else out
        sd = signed_distance(self.domain, p)
        outside = sd < 0.0
        out = np.empty_like(p)
        if np.any(~outside):
            out[~outside] = self._eval_inside(t, p[~outside])
        if np.any(outside):
            q = p[outside]
            if np.any(-sd[outside] >= self.domain.delta0):
                raise OutsideTube("evaluation point outside the extension tube")
            foot = project_to_boundary(self.domain, q)
            out[outside] = 2.0 * self._eval_inside(t, foot) - self._eval_inside(t, 2.0 * foot - q)
        return out[0] if single else out

    def jacobian(self, t, x):
        """Central-difference Jacobian of the interpolant, shape (N, d, d) with J[i, j] = d u_i / d x_j."""
        p, single = as_points(x, self.dim)
        h = self.fd_step
        jac = np.empty((len(p), self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            jac[:, :, j] = (self(t, p + e) - self(t, p - e)) / (2 * h)
        return jac[0] if single else jac

    def time_derivative(self, t, x, step=None):
        p, single = as_points(x, self.dim)
        step = self.fd_step if step is None else step
        lo = max(self.times[0], t - step)
        hi = min(self.times[-1], t + step)
        out = (self(hi, p) - self(lo, p)) / (hi - lo)
        return out[0] if single else out

    def slice_values(self, k):
        return self.values[k]


# -- serialisation ----------------------------------------------------------

_MAGIC = b"STVF0001"


def save_field(field: SpaceTimeVectorField, path):
    """Flat little-endian float64 binary plus a JSON sidecar describing it."""
    path = Path(path)
    header = struct.pack("<8sqq", _MAGIC, len(field.times), field.values.size)
    payload = header + field.times.astype("<f8").tobytes() + field.values.astype("<f8").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    meta = {
        "format": "float64-le",
        "layout": ["time", *(["x"] if field.domain.kind == "interval" else ["r", "phi"]), "component"],
        "shape": list(field.values.shape),
        "grid": field.grid.to_dict(),
        "extended": field.extended,
    }
    side = path.with_name(path.name + ".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    tmp.replace(side)
    return path


def load_field(path) -> SpaceTimeVectorField:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    raw = path.read_bytes()
    magic, nt, nvals = struct.unpack_from("<8sqq", raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a field file")
    off = struct.calcsize("<8sqq")
    times = np.frombuffer(raw, dtype="<f8", count=nt, offset=off)
    values = np.frombuffer(raw, dtype="<f8", count=nvals, offset=off + 8 * nt)
    g = meta["grid"]
    grid = SpaceGrid(domain_from_dict(g["domain"]), g["h"], g["n_angle"])
    return SpaceTimeVectorField(times.copy(), grid, values.reshape(meta["shape"]).copy(), meta["extended"])


# -- space-time L^p norms ------------------------------------------------


def _panels(lo, hi, breaks, m):
    cuts = np.unique(np.concatenate([[lo, hi], [b for b in breaks if lo < b < hi]]))
    x, w = np.polynomial.legendre.leggauss(m)
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def spacetime_quadrature(domain: DomainSpec, t0, t1, m=32, x_breaks=(), t_breaks=()):
    """Iterated Gauss-Legendre rule on (t0, t1) x D.

    Planar presets use x1 = a sin(theta), x2 = b cos(theta) s so that chord
    endpoints carry no square-root singularity.  ``x_breaks`` splits panels
    at given x1 values (e.g. edges of an indicator).
    Returns (times, t_weights, points, x_weights).
    """
    tn, tw = _panels(t0, t1, t_breaks, m)
    if domain.kind == "interval":
        a, b = domain.params
        xn, xw = _panels(a, b, x_breaks, m)
        return tn, tw, xn.reshape(-1, 1), xw
    if domain.kind == "disk":
        a = b = domain.params[0]
    else:
        a, b = domain.params
    tb = [np.arcsin(np.clip(v / a, -1.0, 1.0)) for v in x_breaks]
    th, thw = _panels(-0.5 * np.pi, 0.5 * np.pi, tb, m)
    s, sw = np.polynomial.legendre.leggauss(m)
    x1 = a * np.sin(th)
    half = b * np.cos(th)
    pts = np.column_stack([np.repeat(x1, m), (half[:, None] * s[None, :]).ravel()])
    wts = (thw * a * np.cos(th) * half)[:, None] * sw[None, :]
    return tn, tw, pts, wts.ravel()


def norm_Lp_spacetime(f, p, domain: DomainSpec, t0, t1, m=32, x_breaks=(), t_breaks=(),
                      member=None, grid_n=None):
    """(integral over (t0,t1) x region of |f|^p)^(1/p).

    ``f(t, pts)`` returns a scalar per point or a vector per point (Euclidean
    norm is taken).  With ``member(t, pts)`` the region is time dependent and
    a midpoint tensor grid of ``grid_n`` cells per axis is used instead.
    """
    if p < 1:
        raise ValueError("p must be >= 1")

    def mag(vals):
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 2:
            return np.linalg.norm(vals, axis=1)
        return np.abs(vals)

    total = 0.0
    if member is None:
        tn, tw, pts, xw = spacetime_quadrature(domain, t0, t1, m, x_breaks, t_breaks)
        for t, w in zip(tn, tw):
            total += w * float(np.sum(xw * mag(f(t, pts)) ** p))
        return total ** (1.0 / p)
    n = grid_n or 64
    lo, hi = domain.bbox().T
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i in range(domain.dim)]
    cell = np.prod((hi - lo) / n)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in mesh])
    dt = (t1 - t0) / n
    for k in range(n):
        t = t0 + (k + 0.5) * dt
        inside = member(t, pts)
        if np.any(inside):
            total += dt * cell * float(np.sum(mag(f(t, pts[inside])) ** p))
    return total ** (1.0 / p)
