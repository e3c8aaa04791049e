"""Preset smooth domains, signed distance, nearest-point projection and cones.

Points are passed as arrays of shape ``(N, d)``; a single point of shape
``(d,)`` (or a scalar when ``d == 1``) is accepted and returned unbatched.
Signed distance is positive inside the domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonConvergence, OutsideTube

TOL_GEO = 1e-10


def smoothstep5(s):
    """C^2 quintic ramp: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def smoothstep5_deriv(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s * s * (1.0 - s) ** 2, 0.0)


def cutoff(dist, inner, outer):
    """1 for dist <= inner, 0 for dist >= outer, quintic blend in between."""
    return 1.0 - smoothstep5((np.asarray(dist, dtype=float) - inner) / (outer - inner))


def as_points(x, dim):
    """Return ``(pts, single)`` with ``pts`` of shape (N, dim)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise DomainError(f"scalar point given for a {dim}-dimensional domain")
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if dim == 1 and arr.shape[0] != 1:
            return arr.reshape(-1, 1), False
        if arr.shape[0] != dim:
            raise DomainError(f"point of length {arr.shape[0]} for dimension {dim}")
        return arr.reshape(1, dim), True
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr, False
    raise DomainError(f"expected points of shape (N, {dim}), got {arr.shape}")


def _radius(p):
    """Row norms without the underflow of squaring tiny planar coordinates."""
    return np.hypot(p[:, 0], p[:, 1]) if p.shape[1] == 2 else np.linalg.norm(p, axis=1)


def _restore(values, single):
    return values[0] if single else values


@dataclass(frozen=True)
class DomainSpec:
    """A bounded C^2 domain described by one of the closed-form presets."""

    kind: str
    params: tuple
    dim: int = field(init=False)

    def __post_init__(self):
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if self.kind == "interval":
            if len(params) != 2 or not params[0] < params[1]:
                raise DomainError("interval needs a < b")
            dim = 1
        elif self.kind == "disk":
            if len(params) != 1 or not params[0] > 0:
                raise DomainError("disk needs a radius R > 0")
            dim = 2
        elif self.kind == "ellipse":
            if len(params) != 2 or not (params[0] > 0 and params[1] > 0):
                raise DomainError("ellipse needs semi-axes a, b > 0")
            if params[1] > params[0]:
                raise DomainError("ellipse semi-axes must be ordered a >= b")
            dim = 2
        else:
            raise DomainError(f"unknown domain preset '{self.kind}'")
        object.__setattr__(self, "dim", dim)

    # -- level set and bounding box -------------------------------------

    @property
    def delta0(self) -> float:
        return uniform_sphere_radius(self)

    def level(self, x):
        """Defining function: positive inside, zero on the boundary."""
        p, single = as_points(x, self.dim)
        if self.kind == "interval":
            a, b = self.params
            val = (p[:, 0] - a) * (b - p[:, 0]) / (b - a)
        elif self.kind == "disk":
            val = self.params[0] - _radius(p)
        else:
            a, b = self.params
            val = 1.0 - (p[:, 0] / a) ** 2 - (p[:, 1] / b) ** 2
        return _restore(val, single)

    def bbox(self, pad=0.0):
        if self.kind == "interval":
            a, b = self.params
            return np.array([[a - pad, b + pad]])
        if self.kind == "disk":
            r = self.params[0] + pad
            return np.array([[-r, r], [-r, r]])
        a, b = self.params
        return np.array([[-a - pad, a + pad], [-b - pad, b + pad]])

    def contains(self, x, closed=True, tol=0.0):
        sd = signed_distance(self, x)
        return sd >= -tol if closed else sd > tol

    # -- boundary parametrisation ---------------------------------------

    def boundary_points(self, n):
        """Deterministic, roughly arc-length-uniform boundary samples."""
        if self.kind == "interval":
            a, b = self.params
            return np.array([[a], [b]])
        s = (np.arange(n) + 0.5) / n * 2.0 * np.pi
        if self.kind == "disk":
            r = self.params[0]
            return np.column_stack([r * np.cos(s), r * np.sin(s)])
        a, b = self.params
        # reparametrise by arc length on a fine polygon
        fine = np.linspace(0.0, 2.0 * np.pi, 20 * n + 1)
        pts = np.column_stack([a * np.cos(fine), b * np.sin(fine)])
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        target = (np.arange(n) + 0.5) / n * arc[-1]
        ang = np.interp(target, arc, fine)
        return np.column_stack([a * np.cos(ang), b * np.sin(ang)])

    def sample_boundary(self, rng, n):
        if self.kind == "interval":
            a, b = self.params
            return np.where(rng.random(n) < 0.5, a, b).reshape(-1, 1)
        ang = rng.uniform(0.0, 2.0 * np.pi, n)
        if self.kind == "disk":
            r = self.params[0]
            return np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        a, b = self.params
        return np.column_stack([a * np.cos(ang), b * np.sin(ang)])

    def sample_inside(self, rng, n, margin=0.0):
        """Uniform samples of {signed distance > margin} by rejection."""
        lo, hi = self.bbox().T
        out = []
        count = 0
        while count < n:
            cand = rng.uniform(lo, hi, size=(2 * n + 16, self.dim))
            keep = cand[signed_distance(self, cand) > margin]
            out.append(keep)
            count += len(keep)
        return np.concatenate(out)[:n]

    def sample_tube(self, rng, n, width, inside_width=None):
        """Uniform samples of {-width < signed distance < inside_width}."""
        inside_width = width if inside_width is None else inside_width
        lo, hi = self.bbox(pad=width).T
        out = []
        count = 0
        while count < n:
            cand = rng.uniform(lo, hi, size=(4 * n + 16, self.dim))
            sd = signed_distance(self, cand)
            keep = cand[(sd > -width) & (sd < inside_width)]
            out.append(keep)
            count += len(keep)
        return np.concatenate(out)[:n]

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}


def interval(a=0.0, b=1.0) -> DomainSpec:
    return DomainSpec("interval", (a, b))


def disk(R=1.0) -> DomainSpec:
    return DomainSpec("disk", (R,))


def ellipse(a=2.0, b=1.0) -> DomainSpec:
    return DomainSpec("ellipse", (a, b))


def domain_from_dict(data) -> DomainSpec:
    return DomainSpec(data["kind"], tuple(data["params"]))


# -- nearest-point projection --------------------------------------------


def _ellipse_closest_quadrant(a, b, x, y):
    """Closest point on the ellipse for points with x, y >= 0 and a >= b."""
    px = np.empty_like(x)
    py = np.empty_like(y)
    # within 1e-12 b of the major axis the axis formula is exact to that order and avoids underflow
    on_axis = y <= 1e-12 * b
    gen = ~on_axis
    if np.any(gen):
        xg, yg = x[gen], y[gen]
        # bisect on s = t + b^2 (t the Lagrange multiplier) so small s keeps full precision
        c = a * a - b * b
        lo = b * yg
        hi = np.sqrt(a * a * xg * xg + b * b * yg * yg)
        lo = np.minimum(lo, hi)

        def resid(s):
            return (a * xg / (s + c)) ** 2 + (b * yg / s) ** 2 - 1.0

        for _ in range(200):
            mid = 0.5 * (lo + hi)
            pos = resid(mid) > 0.0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
            if np.all(hi - lo <= 1e-16 * hi):
                break
        sg = 0.5 * (lo + hi)
        if not np.all(np.isfinite(sg)):
            raise NonConvergence("ellipse projection did not converge")
        px[gen] = a * a * xg / (sg + c)
        py[gen] = b * b * yg / sg
    if np.any(on_axis):
        xa = x[on_axis]
        denom = a * a - b * b
        out_x = np.full_like(xa, a)
        out_y = np.zeros_like(xa)
        if denom > 0:
            inner = a * xa < denom
            x0 = a * a * xa[inner] / denom
            out_x[inner] = x0
            out_y[inner] = b * np.sqrt(np.maximum(0.0, 1.0 - (x0 / a) ** 2))
        px[on_axis] = out_x
        py[on_axis] = out_y
    return px, py


def project_to_boundary(dom: DomainSpec, x):
    """Nearest boundary point; ties (e.g. the disk centre) are broken deterministically."""
    p, single = as_points(x, dom.dim)
    if dom.kind == "interval":
        a, b = dom.params
        out = np.where(p[:, 0] - a <= b - p[:, 0], a, b).reshape(-1, 1)
    elif dom.kind == "disk":
        R = dom.params[0]
        r = _radius(p)
        safe = np.where(r > 0.0, r, 1.0)
        out = R * p / safe[:, None]
        out[r == 0.0] = [R, 0.0]
    else:
        a, b = dom.params
        sx, sy = np.sign(p[:, 0]), np.sign(p[:, 1])
        sx[sx == 0] = 1.0
        sy[sy == 0] = 1.0
        qx, qy = _ellipse_closest_quadrant(a, b, np.abs(p[:, 0]), np.abs(p[:, 1]))
        out = np.column_stack([sx * qx, sy * qy])
    return _restore(out, single)


def signed_distance(dom: DomainSpec, x):
    p, single = as_points(x, dom.dim)
    if dom.kind == "interval":
        a, b = dom.params
        val = np.minimum(p[:, 0] - a, b - p[:, 0])
    elif dom.kind == "disk":
        val = dom.params[0] - _radius(p)
    else:
        q = project_to_boundary(dom, p)
        dist = np.linalg.norm(p - q, axis=1)
        val = np.where(dom.level(p) >= 0.0, dist, -dist)
    return _restore(val, single)


def boundary_normal(dom: DomainSpec, q):
    """Inward unit normal at boundary points ``q``."""
    p, single = as_points(q, dom.dim)
    if dom.kind == "interval":
        a, b = dom.params
        out = np.where(np.abs(p[:, 0] - a) <= np.abs(p[:, 0] - b), 1.0, -1.0).reshape(-1, 1)
    elif dom.kind == "disk":
        r = _radius(p)
        out = -p / np.where(r > 0, r, 1.0)[:, None]
    else:
        a, b = dom.params
        g = np.column_stack([p[:, 0] / a**2, p[:, 1] / b**2])
        out = -g / np.linalg.norm(g, axis=1)[:, None]
    return _restore(out, single)


def uniform_sphere_radius(dom: DomainSpec) -> float:
    """Radius of the uniform interior/exterior sphere condition."""
    if dom.kind == "interval":
        a, b = dom.params
        return 0.5 * (b - a)
    if dom.kind == "disk":
        return dom.params[0]
    a, b = dom.params
    return b * b / a


def inward_normal_extended(dom: DomainSpec, x):
    """Inward normal of the nearest boundary point, tapered to zero off the tube.

    Equals the unit normal where the distance to the boundary is below
    delta0/2 and vanishes once it reaches delta0.
    """
    p, single = as_points(x, dom.dim)
    d0 = dom.delta0
    dist = np.abs(signed_distance(dom, p))
    weight = cutoff(dist, 0.5 * d0, d0)
    out = np.zeros_like(p)
    live = weight > 0.0
    if np.any(live):
        out[live] = boundary_normal(dom, project_to_boundary(dom, p[live])) * weight[live, None]
    return _restore(out, single)


def reflect_across_boundary(dom: DomainSpec, x):
    """Mirror image ``2 proj(x) - x``; requires x inside the delta0 tube."""
    p, single = as_points(x, dom.dim)
    dist = np.abs(signed_distance(dom, p))
    if np.any(dist >= dom.delta0):
        raise OutsideTube("point is outside the delta0 tube around the boundary")
    out = 2.0 * project_to_boundary(dom, p) - p
    return _restore(out, single)


@dataclass(frozen=True)
class TubeNeighborhood:
    """{x : dist(x, D) < width}."""

    domain: DomainSpec
    width: float

    def contains(self, x):
        return signed_distance(self.domain, x) > -self.width

    def sample(self, rng, n):
        lo, hi = self.domain.bbox(pad=self.width).T
        out = []
        count = 0
        while count < n:
            cand = rng.uniform(lo, hi, size=(2 * n + 16, self.domain.dim))
            keep = cand[self.contains(cand)]
            out.append(keep)
            count += len(keep)
        return np.concatenate(out)[:n]


def cone_contains(apex, axis, angle, radius, y):
    """Membership in {y : 0 < |y - apex| < radius, (y - apex).axis > cos(angle) |y - apex|}.

    ``apex`` and ``axis`` broadcast against ``y`` row-wise; ``axis`` is normalised.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    apex = np.atleast_2d(np.asarray(apex, dtype=float))
    axis = np.atleast_2d(np.asarray(axis, dtype=float))
    axis = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    diff = y - apex
    dist = np.linalg.norm(diff, axis=1)
    proj = np.sum(diff * axis, axis=1)
    return (dist > 0.0) & (dist < radius) & (proj > np.cos(angle) * dist)


def sample_cone(rng, apex, axis, angle, radius, n, shrink=1.0 - 1e-9):
    """Points strictly inside the cone; directions are uniform in angle.

    One probe per row of ``apex``/``axis`` (broadcast to ``n`` rows).
    """
    apex = np.broadcast_to(np.atleast_2d(apex), (n, np.shape(np.atleast_2d(apex))[1]))
    axis = np.broadcast_to(np.atleast_2d(axis), apex.shape)
    axis = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    d = apex.shape[1]
    dist = radius * shrink * rng.random(n) ** (1.0 / d)
    dist = np.maximum(dist, radius * 1e-6)
    if d == 1:
        return apex + dist[:, None] * axis
    tilt = angle * shrink * rng.uniform(-1.0, 1.0, n)
    perp = np.column_stack([-axis[:, 1], axis[:, 0]])
    direction = np.cos(tilt)[:, None] * axis + np.sin(tilt)[:, None] * perp
    return apex + dist[:, None] * direction
