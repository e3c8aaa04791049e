"""Backward parabolic Neumann problem whose solution drives the Zvonkin transform.

For each component i the solver computes

    d_t u + 1/2 Lap u + b . grad u = 0   on [0, T) x D,
    du/dn = n_i                          on [0, T) x boundary,
    u(T, x) = x,

by Crank-Nicolson in tau = T - t on cell-centred grids whose ghost layer
closes the Neumann condition.  The difference stencils reproduce affine
functions exactly (the angular stencils on the disk use exact first-harmonic
denominators), so b = 0 returns the identity and b = const returns
x + (T - t) c up to round-off.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DomainError, NonConvergence
from .fields import DriftField, SpaceGrid, SpaceTimeVectorField, mollify

SOLVE_TOL = 1e-8


@dataclass
class ParabolicProblem:
    drift: DriftField
    T: float
    h: float = 2.0**-7
    dt: float = 2.0**-10
    n_angle: int = 0
    mollify_level: int | None = None
    max_slices: int = 65

    @property
    def domain(self):
        return self.drift.domain


@dataclass
class PDESolution:
    field: SpaceTimeVectorField
    max_residual: float
    steps: int
    drift_used: str
    timings: dict = field(default_factory=dict)


def _interval_operator(grid: SpaceGrid, bvals):
    """Affine operator A u + c on interior nodes for the interval."""
    n, h = grid.n, grid.h
    b = bvals[:, 0]
    diff = 0.5 / h**2
    adv = b / (2 * h)
    lower = diff - adv
    upper = diff + adv
    main = np.full(n, -2 * diff)
    # ghost closures u_0 = u_1 - h g_a and u_{n+1} = u_n + h g_b with g = u'(boundary) = 1
    main[0] += lower[0]
    main[-1] += upper[-1]
    A = sp.diags([lower[1:], main, upper[:-1]], [-1, 0, 1], format="csc")
    c = np.zeros(n)
    c[0] = -lower[0] * h
    c[-1] = upper[-1] * h
    return A, c[:, None]


def _disk_operator(grid: SpaceGrid, bvals):
    """Affine operator on interior polar nodes (j < n) for the disk.

    Returns A and the constant part for each Cartesian component.
    """
    n, m, h = grid.n, grid.n_angle, grid.h
    r = grid.r[:n]
    phi = grid.phi
    rr = np.repeat(r, m)
    pp = np.tile(phi, n)
    er = np.column_stack([np.cos(pp), np.sin(pp)])
    ephi = np.column_stack([-np.sin(pp), np.cos(pp)])
    b_r = np.sum(bvals * er, axis=1)
    b_phi = np.sum(bvals * ephi, axis=1)
    j = np.repeat(np.arange(n), m)
    k = np.tile(np.arange(m), n)
    idx = j * m + k
    dphi = grid.dphi
    ang2 = 2.0 * (1.0 - np.cos(dphi))
    ang1 = 2.0 * np.sin(dphi)

    r_out = rr + 0.5 * h
    r_in = rr - 0.5 * h
    w_out = 0.5 * r_out / (rr * h * h) + b_r / (2 * h)
    w_in_diff = 0.5 * r_in / (rr * h * h)
    w_in_adv = -b_r / (2 * h)
    w_ang = 0.5 / (rr * rr * ang2)
    w_kp = w_ang + b_phi / (rr * ang1)
    w_km = w_ang - b_phi / (rr * ang1)
    diag = -(0.5 * r_out / (rr * h * h)) - w_in_diff - 2 * w_ang

    rows, cols, vals = [], [], []

    def add(rw, cl, vl):
        rows.append(rw)
        cols.append(cl)
        vals.append(vl)

    add(idx, idx, diag)
    add(idx, j * m + (k + 1) % m, w_kp)
    add(idx, j * m + (k - 1) % m, w_km)
    # outward radial neighbour; the ghost row j = n is u_{n-1} + h g
    inner = j < n - 1
    add(idx[inner], idx[inner] + m, w_out[inner])
    edge = ~inner
    add(idx[edge], idx[edge], w_out[edge])
    # inward radial neighbour: diffusion flux vanishes at j = 0, the advection
    # stencil uses the node across the origin
    deep = j > 0
    add(idx[deep], idx[deep] - m, w_in_diff[deep] + w_in_adv[deep])
    core = ~deep
    add(idx[core], k[core] * 0 + (k[core] + m // 2) % m, w_in_adv[core])

    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * m, n * m)
    )
    g = np.column_stack([np.cos(pp), np.sin(pp)])
    c = np.where(edge[:, None], (w_out * h)[:, None] * g, 0.0)
    return A, c


def _drift_values(problem: ParabolicProblem, grid: SpaceGrid, t):
    drift = problem.drift
    if problem.mollify_level is not None and drift.discontinuous:
        drift = mollify(drift, problem.mollify_level)
    nodes = grid.nodes()
    if grid.domain.kind == "interval":
        nodes = nodes[1:-1]
    else:
        nodes = nodes[: grid.n * grid.n_angle]
    return drift(t, nodes), drift


def _pack(grid: SpaceGrid, interior):
    """Add the ghost layer to interior values (one column per component)."""
    h = grid.h
    if grid.domain.kind == "interval":
        full = np.empty((grid.n + 2, 1))
        full[1:-1] = interior
        full[0] = interior[0] - h
        full[-1] = interior[-1] + h
        return full
    n, m = grid.n, grid.n_angle
    full = np.empty((n + 1, m, 2))
    full[:n] = interior.reshape(n, m, 2)
    g = np.column_stack([np.cos(grid.phi), np.sin(grid.phi)])
    full[n] = full[n - 1] + h * g
    return full


def solve_neumann_terminal(problem: ParabolicProblem) -> PDESolution:
    """Solve the terminal-value Neumann problem on [0, T]."""
    if problem.T <= 0:
        raise DomainError("horizon T must be positive")
    dom = problem.domain
    if dom.kind not in ("interval", "disk"):
        raise DomainError("gridded solves support the interval and disk presets")
    if not np.isfinite(problem.drift.sup_norm):
        raise DomainError("drift must be bounded")
    start = time.perf_counter()
    grid = SpaceGrid(dom, problem.h, problem.n_angle)
    steps = max(1, int(np.ceil(problem.T / problem.dt - 1e-9)))
    dtau = problem.T / steps
    stride = max(1, int(np.ceil(steps / (problem.max_slices - 1))))
    time_dep = problem.drift.time_dependent

    def operator(t):
        bvals, used = _drift_values(problem, grid, t)
        if dom.kind == "interval":
            A, c = _interval_operator(grid, bvals)
        else:
            A, c = _disk_operator(grid, bvals)
        return A, c, used

    nodes = grid.nodes()
    u = nodes[1:-1].copy() if dom.kind == "interval" else nodes[: grid.n * grid.n_angle].copy()
    eye = sp.identity(u.shape[0], format="csc")
    A, c, used = operator(problem.T)
    lu = splu((eye - 0.5 * dtau * A).tocsc(), permc_spec="MMD_AT_PLUS_A")
    setup = time.perf_counter() - start

    stored_tau = [0.0]
    stored = [_pack(grid, u)]
    max_res = 0.0
    for step in range(1, steps + 1):
        t_new = problem.T - step * dtau
        if time_dep:
            A_old, c_old = A, c
            A, c, _ = operator(t_new)
            lu = splu((eye - 0.5 * dtau * A).tocsc(), permc_spec="MMD_AT_PLUS_A")
            rhs = u + 0.5 * dtau * (A_old @ u) + 0.5 * dtau * (c_old + c)
        else:
            rhs = u + 0.5 * dtau * (A @ u) + dtau * c
        u = lu.solve(rhs)
        lhs = u - 0.5 * dtau * (A @ u)
        res = float(np.max(np.abs(lhs - rhs)) / max(1.0, float(np.max(np.abs(rhs)))))
        max_res = max(max_res, res)
        if res > SOLVE_TOL:
            raise NonConvergence(f"linear solve residual {res:.3e} at step {step}")
        if step % stride == 0 or step == steps:
            stored_tau.append(step * dtau)
            stored.append(_pack(grid, u))
    times = problem.T - np.array(stored_tau[::-1])
    times[0] = max(times[0], 0.0)
    values = np.array(stored[::-1])
    fld = SpaceTimeVectorField(times, grid, values)
    desc = "mollified" if used is not problem.drift else "raw"
    return PDESolution(
        field=fld,
        max_residual=max_res,
        steps=steps,
        drift_used=desc,
        timings={"setup_s": setup, "total_s": time.perf_counter() - start},
    )


def extend_across_boundary(field: SpaceTimeVectorField) -> SpaceTimeVectorField:
    """Even reflection across the boundary: u(x) = 2 u(proj x) - u(2 proj x - x)."""
    return field.with_extension(True)


def holder_estimate(field: SpaceTimeVectorField, n_points=256, seed=0):
    """Fit the time-Hoelder modulus of (u, grad u) over the stored slices.

    Uses m(s, t) = max_x |u(t,x) - u(s,x)| + max_x max_ij |du(t,x) - du(s,x)|_ij,
    fits log m against log |t - s| and returns (alpha0, M0, degenerate) with
    M0 the smallest constant for which m <= M0 |t - s|^alpha0 on all pairs.
    A time-constant field returns (1.0, 0.0, True).
    """
    rng = np.random.default_rng(seed)
    dom = field.domain
    pts = dom.sample_inside(rng, n_points)
    times = field.times
    vals = np.array([field(t, pts) for t in times])
    jacs = np.array([field.jacobian(t, pts) for t in times])
    scale = max(1.0, float(np.max(np.abs(vals))))
    lags, mods = [], []
    for a in range(len(times)):
        for b in range(a + 1, len(times)):
            du = np.max(np.linalg.norm(vals[b] - vals[a], axis=-1))
            dj = np.max(np.abs(jacs[b] - jacs[a]))
            lags.append(times[b] - times[a])
            mods.append(du + dj)
    lags = np.array(lags)
    mods = np.array(mods)
    if len(mods) == 0 or np.max(mods) <= 1e-11 * scale:
        return 1.0, 0.0, True
    keep = mods > 1e-12 * scale
    slope = np.polyfit(np.log(lags[keep]), np.log(mods[keep]), 1)[0]
    alpha0 = float(np.clip(slope, 0.05, 1.0))
    M0 = float(np.max(mods / lags**alpha0))
    return alpha0, M0, False
