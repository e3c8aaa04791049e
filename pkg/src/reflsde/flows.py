"""Flows of the oblique direction field in the image domain and hitting times.

The direction field is gamma(t, y) = n(u^{-1}(t, y)) * phi(t, y): the inward
normal pulled through the transform, switched off by ``phi`` once the preimage
is more than delta0 / 4 outside D (and fully off at delta0 / 2).

Flows y(t, x, r) solve dy/dr = gamma(t, y) with y(0) = x and are integrated
by RK4 jointly with

* psi = D_x y, with dpsi/dr = psi Dgamma^T   (rows indexed by x),
* lam = d_t y, with dlam/dr = d_t gamma + Dgamma lam.

Integrating the augmented system with the same stages makes psi the exact
derivative of the discrete y-map up to the finite-difference error in Dgamma.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence
from .geometry import as_points, cutoff, inward_normal_extended, signed_distance
from .zvonkin import ConstantsLedger, TimeDependentDomain, ZvonkinTransform


class DirectionField:
    def __init__(self, tr: ZvonkinTransform, fd_step=1e-5, t_step=1e-5):
        self.tr = tr
        self.domain = tr.domain
        self.dim = tr.dim
        self.fd_step = fd_step
        self.t_step = t_step

    def preimage(self, t, y, x0=None):
        return self.tr.invert(t, y, x0=x0, strict=False)

    def _from_preimage(self, x):
        bad = np.isnan(x).any(axis=1)
        xs = np.where(bad[:, None], 0.0, x)
        if np.any(~bad):
            out = np.zeros_like(xs)
            good = ~bad
            outside = np.maximum(0.0, -signed_distance(self.domain, xs[good]))
            d0 = self.domain.delta0
            out[good] = inward_normal_extended(self.domain, xs[good]) * cutoff(outside, 0.25 * d0, 0.5 * d0)[:, None]
            return out
        return np.zeros_like(xs)

    def __call__(self, t, y, x0=None, return_preimage=False):
        p, single = as_points(y, self.dim)
        x = self.preimage(t, p, x0)
        g = self._from_preimage(x)
        if return_preimage:
            return g, x
        return g[0] if single else g

    def _preimage_jacobian(self, x):
        """Central-difference derivative of x -> n(x) * cutoff in the preimage variable."""
        h = self.fd_step
        out = np.empty((len(x), self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            out[:, :, k] = (self._from_preimage(x + e) - self._from_preimage(x - e)) / (2 * h)
        return out

    def _chain(self, t, p, x_base):
        if x_base is None:
            x_base = self.preimage(t, p)
        bad = np.isnan(x_base).any(axis=1)
        jac = np.zeros((len(p), self.dim, self.dim))
        good = ~bad
        if np.any(good):
            x = x_base[good]
            jac[good] = self._preimage_jacobian(x) @ np.linalg.inv(self.tr.jacobian(t, x))
        return jac, x_base, good

    def jacobian(self, t, y, x_base=None):
        """Dgamma with J[j, k] = d gamma_j / d y_k, shape (N, d, d).

        Chain rule through the preimage: Dgamma = D(n cutoff)(x) (D_x u(t, x))^{-1}.
        """
        p, _ = as_points(y, self.dim)
        return self._chain(t, p, x_base)[0]

    def time_derivative(self, t, y, x_base=None, jac=None):
        """d_t gamma at fixed y, equal to -Dgamma d_t u(t, x) at the preimage x."""
        p, _ = as_points(y, self.dim)
        if jac is None:
            jac, x_base, good = self._chain(t, p, x_base)
        else:
            good = ~np.isnan(x_base).any(axis=1)
        out = np.zeros_like(p)
        if np.any(good):
            du = self.tr.time_derivative(t, x_base[good])
            out[good] = -np.einsum("njk,nk->nj", jac[good], du)
        return out


@dataclass
class FlowState:
    y: np.ndarray
    psi: np.ndarray | None = None
    lam: np.ndarray | None = None

    def copy(self):
        return FlowState(
            self.y.copy(),
            None if self.psi is None else self.psi.copy(),
            None if self.lam is None else self.lam.copy(),
        )


def _rhs(field: DirectionField, t, st: FlowState, want_psi, want_lam):
    g, x = field(t, st.y, return_preimage=True)
    dpsi = dlam = None
    if want_psi or want_lam:
        J = field.jacobian(t, st.y, x)
        if want_psi:
            dpsi = np.einsum("nik,njk->nij", st.psi, J)
        if want_lam:
            dlam = field.time_derivative(t, st.y, x, J) + np.einsum("njk,nk->nj", J, st.lam)
    return FlowState(g, dpsi, dlam)


def _axpy(st: FlowState, h, k: FlowState):
    hh = h[:, None]
    return FlowState(
        st.y + hh * k.y,
        None if st.psi is None else st.psi + h[:, None, None] * k.psi,
        None if st.lam is None else st.lam + hh * k.lam,
    )


def rk4_step(field: DirectionField, t, st: FlowState, h):
    """One RK4 step of size h (array, one per row)."""
    want_psi = st.psi is not None
    want_lam = st.lam is not None
    k1 = _rhs(field, t, st, want_psi, want_lam)
    k2 = _rhs(field, t, _axpy(st, 0.5 * h, k1), want_psi, want_lam)
    k3 = _rhs(field, t, _axpy(st, 0.5 * h, k2), want_psi, want_lam)
    k4 = _rhs(field, t, _axpy(st, h, k3), want_psi, want_lam)
    out = st.copy()
    hh = h / 6.0
    out.y = st.y + hh[:, None] * (k1.y + 2 * k2.y + 2 * k3.y + k4.y)
    if want_psi:
        out.psi = st.psi + hh[:, None, None] * (k1.psi + 2 * k2.psi + 2 * k3.psi + k4.psi)
    if want_lam:
        out.lam = st.lam + hh[:, None] * (k1.lam + 2 * k2.lam + 2 * k3.lam + k4.lam)
    return out


def _initial(x, with_psi, with_lam):
    n, d = x.shape
    return FlowState(
        x.copy(),
        np.repeat(np.eye(d)[None], n, axis=0) if with_psi else None,
        np.zeros((n, d)) if with_lam else None,
    )


def flow(field: DirectionField, t, x, r, max_step=1e-2, with_psi=True, with_lam=False) -> FlowState:
    """y(t, x, r) (and derivatives) by RK4 with |step| <= max_step; ``r`` may vary per point."""
    x, _ = as_points(x, field.dim)
    r = np.broadcast_to(np.asarray(r, dtype=float), (len(x),)).copy()
    n_steps = max(1, int(np.ceil(np.max(np.abs(r)) / max_step)))
    h = r / n_steps
    st = _initial(x, with_psi, with_lam)
    for _ in range(n_steps):
        st = rk4_step(field, t, st, h)
    return st


@dataclass
class HittingRecord:
    gamma_time: np.ndarray
    state: FlowState
    defined: np.ndarray
    defect: np.ndarray
    transversality: np.ndarray
    grad: np.ndarray | None = None
    dt: np.ndarray | None = None


def hitting_time(field: DirectionField, t, x, t0, z, rho1, max_step=1e-2, tol=1e-12, with_lam=False,
                 max_newton=30, normal=None) -> HittingRecord:
    """Parameter r in (-rho1, rho1) at which y(t, x, r) meets the hyperplane through z normal to gamma(t0, z).

    ``z`` (and ``normal``) may be one point or one row per x, so that points
    belonging to different charts are marched together.  Marches by RK4
    toward the plane, brackets the crossing and polishes with Newton on the
    last (partial) step.  Rows with no crossing inside (-rho1, rho1) are
    flagged undefined and carry NaN.
    """
    x, _ = as_points(x, field.dim)
    n = len(x)
    z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1, field.dim), (n, field.dim))
    if normal is None:
        anchors, inv = np.unique(z, axis=0, return_inverse=True)
        g0 = field(t0, anchors)[np.asarray(inv).ravel()]
    else:
        g0 = np.broadcast_to(np.asarray(normal, dtype=float).reshape(-1, field.dim), (n, field.dim))
    if np.any(np.linalg.norm(g0, axis=1) < 0.5):
        raise ValueError("gamma vanishes at an anchor point; it is not near the image boundary")

    def height(y, rows=slice(None)):
        return np.einsum("nd,nd->n", y - z[rows], g0[rows])

    st = _initial(x, True, with_lam)
    H = height(st.y)
    sgn = -np.sign(H)
    sgn[sgn == 0] = 1.0
    r = np.zeros(n)
    done = np.abs(H) <= tol
    found = done.copy()
    while True:
        remaining = rho1 - np.abs(r)
        live = np.nonzero(~found & (remaining > 1e-15))[0]
        if live.size == 0:
            break
        h = np.minimum(max_step, remaining[live]) * sgn[live]
        sub = FlowState(st.y[live], st.psi[live], None if st.lam is None else st.lam[live])
        trial = rk4_step(field, t, sub, h)
        H_new = height(trial.y, live)
        crossed = np.sign(H_new) != np.sign(H[live])
        adv = live[~crossed]
        # rows that crossed keep the start of the bracketing step
        st.y[adv] = trial.y[~crossed]
        st.psi[adv] = trial.psi[~crossed]
        if st.lam is not None:
            st.lam[adv] = trial.lam[~crossed]
        r[adv] += h[~crossed]
        H[adv] = H_new[~crossed]
        found[live[crossed]] = True
    defined = found.copy()
    # Newton on the partial step delta from the bracket start; derivatives only on the final step
    delta = np.zeros(n)
    rows = np.nonzero(found & ~done)[0]
    final = st.copy()
    if rows.size:
        sub = FlowState(st.y[rows], st.psi[rows], None if st.lam is None else st.lam[rows])
        bare = FlowState(sub.y)
        gy = field(t, sub.y)
        delta_r = -H[rows] / np.maximum(np.einsum("nd,nd->n", gy, g0[rows]), 1e-3)
        for _ in range(max_newton):
            res = rk4_step(field, t, bare, delta_r)
            Hr = height(res.y, rows)
            if np.all(np.abs(Hr) <= tol):
                break
            slope = np.einsum("nd,nd->n", field(t, res.y), g0[rows])
            delta_r = delta_r - Hr / np.where(np.abs(slope) > 1e-3, slope, 1e-3)
        res = rk4_step(field, t, sub, delta_r)
        delta[rows] = delta_r
        final.y[rows] = res.y
        final.psi[rows] = res.psi
        if final.lam is not None:
            final.lam[rows] = res.lam
    gamma_time = r + delta
    defined &= np.abs(gamma_time) < rho1
    defect = np.abs(height(final.y))
    if np.any(defined & (defect > 1e-9)):
        raise NonConvergence("hitting-time Newton polish did not reach the hyperplane")
    gamma_time = np.where(defined, gamma_time, np.nan)
    transv = np.einsum("nd,nd->n", field(t, final.y), g0)
    rec = HittingRecord(gamma_time, final, defined, defect, transv)
    dot = np.where(defined, transv, np.nan)
    rec.grad = -np.einsum("nij,nj->ni", final.psi, g0) / dot[:, None]
    if final.lam is not None:
        rec.dt = -np.einsum("nd,nd->n", final.lam, g0) / dot
    return rec


def transversality_check(field: DirectionField, t0, z0, delta3, eta, theta1, n_samples=2000, seed=0):
    """min gamma(t, x) . gamma(t', x') over the window [t0 - eta, t0 + eta] x B(z0, delta3)."""
    rng = np.random.default_rng(seed)
    T = field.tr.T
    lo, hi = max(0.0, t0 - eta), min(T, t0 + eta)
    times = np.unique(np.concatenate([[lo, t0, hi], rng.uniform(lo, hi, 5)]))
    z0 = np.asarray(z0, dtype=float).reshape(field.dim)
    samples = []
    for t in times:
        pts = _ball(rng, z0, delta3, n_samples // len(times) + 1)
        samples.append(field(t, pts))
    g = np.concatenate(samples)
    norms = np.linalg.norm(g, axis=1)
    unit_ok = np.all(norms > 1 - 1e-9)
    # extreme pairs: min of pairwise dots is attained between the two most distant directions
    mean = g.mean(axis=0)
    mean /= np.linalg.norm(mean)
    ang = np.arccos(np.clip(g @ mean, -1, 1))
    worst = float(np.min(g @ g.T)) if len(g) <= 4000 else float(np.cos(2 * ang.max()))
    return {"min_dot": worst, "cos_theta1": float(np.cos(theta1)), "unit": bool(unit_ok),
            "pass": bool(unit_ok and worst >= np.cos(theta1))}


def _ball(rng, centre, radius, n):
    d = len(centre)
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return centre + v * (radius * rng.random(n) ** (1.0 / d))[:, None]


def fit_delta3(field: DirectionField, t0, z0, start, eta, theta1, seed=0, max_halvings=20):
    """Halve the ball radius and the time window together until transversality holds.

    Returns (delta3, eta, report).
    """
    radius = start
    for _ in range(max_halvings):
        rep = transversality_check(field, t0, z0, radius, eta, theta1, seed=seed)
        if rep["pass"]:
            return radius, eta, rep
        radius *= 0.5
        eta *= 0.5
    raise NonConvergence("no transversality radius found")


def fit_rho0(field: DirectionField, n_samples=400, seed=0, start=0.5, n_times=4, max_halvings=12):
    """Largest power of 1/2 with det psi >= 1/2 for |r| < rho0 on sampled (t, x)."""
    rng = np.random.default_rng(seed)
    dom = field.domain
    T = field.tr.T
    rho = start
    for _ in range(max_halvings):
        ok = True
        for t in np.linspace(0.0, T, n_times):
            x0 = dom.sample_tube(rng, n_samples // n_times, 0.5 * dom.delta0)
            pts = field.tr(t, x0)
            for frac in (-1.0, -0.5, 0.5, 1.0):
                st = flow(field, t, pts, frac * rho * (1 - 1e-9), max_step=rho / 8)
                if np.min(np.linalg.det(st.psi)) < 0.5:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return rho
        rho *= 0.5
    raise NonConvergence("det psi >= 1/2 fails at every tested flow length")


# -- local charts at image-boundary points ----------------------------------------


@dataclass
class LocalChart:
    """Everything needed to work near an image-boundary point (t0, z0)."""

    t0: float
    z0: np.ndarray
    z: np.ndarray
    gamma0: np.ndarray
    delta3: float
    delta4: float
    delta5: float
    eta: float
    rho1: float
    theta0: float
    theta1: float


def make_chart(field: DirectionField, t0, x_boundary, ledger: ConstantsLedger, delta5=None, rho1=None):
    """Chart anchored at z0 = u(t0, x_boundary) using ledger constants."""
    theta0, theta1, delta3, eta, rho0 = ledger.require("theta0", "theta1", "delta3", "eta", "rho0")
    delta4 = ledger.get("delta4", 0.45 * delta3)
    if delta5 is None:
        delta5 = ledger.get("delta5", delta4 * np.sin(theta0) / 16)
    if rho1 is None:
        rho1 = ledger.get("rho1", min(delta3 / 4, rho0))
    z0 = field.tr(t0, np.atleast_2d(x_boundary))[0]
    st = flow(field, t0, z0[None], 0.5 * delta5, max_step=min(1e-2, delta5), with_psi=False)
    z = st.y[0]
    g0 = field(t0, z[None])[0]
    return LocalChart(t0, z0, z, g0, delta3, delta4, delta5, eta, rho1, theta0, theta1)


def cone_Cz_contains(chart: LocalChart, x, delta=None, theta=None):
    """Membership in the union over c of B(z - c gamma0, 2 delta tan theta1), intersected with B(z, delta)."""
    x, _ = as_points(x, len(chart.z))
    delta = chart.delta5 if delta is None else delta
    theta = chart.theta1 if theta is None else theta
    w = x - chart.z
    along = w @ chart.gamma0
    perp = np.linalg.norm(w - along[:, None] * chart.gamma0, axis=1)
    # distance to the ray {z - c gamma0 : c >= 0}
    dist_ray = np.where(along <= 0, perp, np.linalg.norm(w, axis=1))
    return (dist_ray < 2 * delta * np.tan(theta)) & (np.linalg.norm(w, axis=1) < delta)


def interior_preservation_check(field: DirectionField, chart: LocalChart, eps, n_samples=400, seed=0,
                                n_r=32):
    """Flows started in C(z, delta5) inside D(t, eps) stay in D(t, c) up to the hitting time.

    c = min(eps, delta5 / 16) * sin(theta0 / 2).
    """
    rng = np.random.default_rng(seed)
    moving = TimeDependentDomain(field.tr)
    T = field.tr.T
    lo, hi = max(0.0, chart.t0 - chart.eta), min(T, chart.t0 + chart.eta)
    c = min(eps, chart.delta5 / 16) * np.sin(chart.theta0 / 2)
    checked = violations = 0
    worst = np.inf
    for t in rng.uniform(lo, hi, 4):
        cand = _ball(rng, chart.z, chart.delta5, 8 * n_samples)
        cand = cand[cone_Cz_contains(chart, cand)]
        cand = cand[moving.inner_region(t, cand, eps)]
        if len(cand) == 0:
            continue
        cand = cand[: n_samples // 4 + 1]
        rec = hitting_time(field, t, cand, chart.t0, chart.z, chart.rho1, max_step=min(1e-2, chart.delta5 / 4))
        ok = rec.defined & (np.abs(rec.gamma_time) > 0)
        cand, G = cand[ok], rec.gamma_time[ok]
        for frac in np.linspace(1.0 / n_r, 1.0, n_r):
            st = flow(field, t, cand, frac * G, max_step=min(1e-2, chart.delta5 / 4), with_psi=False)
            inside = moving.contains(t, st.y)
            dist = moving.distance_to_boundary(t, st.y)
            margin = np.where(inside, dist, -dist) - c
            violations += int(np.sum(margin <= 0))
            worst = min(worst, float(margin.min()) if len(margin) else np.inf)
            checked += len(cand)
    return {"checked": checked, "violations": violations, "threshold": c, "worst_margin": worst}


def measure_change_bound(field: DirectionField, t, region_pts, cell_volume, r, f):
    """Compare integral_A f(y(x, r)) dx with 2 integral_{y(A, r)} f.

    The right side is evaluated by change of variables, int_A f(y) |det psi| dx.
    """
    st = flow(field, t, region_pts, r)
    fy = f(st.y)
    det = np.abs(np.linalg.det(st.psi))
    lhs = float(np.sum(fy) * cell_volume)
    rhs = float(np.sum(fy * det) * cell_volume)
    return {"lhs": lhs, "rhs": rhs, "min_det": float(det.min()), "pass": bool(lhs <= 2 * rhs + 1e-12)}


def flow_diagnostics(field: DirectionField, theta1, n_points=100, seed=0, eta=None, fd=1e-6, t_fd=1e-5):
    """Consistency checks of the flow and hitting-time machinery at one chart.

    Fits delta3 (transversality radius) and rho0 first, then samples points
    in B(z0, 0.45 delta3) around an image-boundary anchor and compares psi,
    grad Gamma and d_t Gamma with finite differences.
    """
    rng = np.random.default_rng(seed)
    tr = field.tr
    dom = field.domain
    T = tr.T
    eta = T / 8 if eta is None else eta
    t = T / 3
    rho0 = fit_rho0(field, seed=seed)
    xb = dom.sample_boundary(rng, 1)
    z0 = tr(t, xb)[0]
    delta3, eta, trans = fit_delta3(field, t, z0, 0.25 * dom.delta0, eta, theta1, seed=seed)
    delta4 = 0.45 * delta3
    rho1 = min(delta3 / 4, rho0)
    # psi against the finite-difference Jacobian of the flow map
    x = tr(t, dom.sample_tube(rng, n_points, 0.2))
    r = 0.5 * rho0
    st = flow(field, t, x, r)
    jac = np.empty_like(st.psi)
    for i in range(field.dim):
        e = np.zeros(field.dim)
        e[i] = fd
        jac[:, i, :] = (flow(field, t, x + e, r, with_psi=False).y - flow(field, t, x - e, r, with_psi=False).y) / (2 * fd)
    psi_rel = float(np.max(np.abs(jac - st.psi)) / np.max(np.abs(st.psi)))
    # hitting times in the chart
    pts = _ball(rng, z0, delta4, n_points)
    step = min(1e-2, rho1 / 4)
    rec = hitting_time(field, t, pts, t, z0, rho1, max_step=step, with_lam=True)
    ok = rec.defined
    fdg = np.empty((n_points, field.dim))
    for i in range(field.dim):
        e = np.zeros(field.dim)
        e[i] = fd
        fdg[:, i] = (hitting_time(field, t, pts + e, t, z0, rho1, max_step=step).gamma_time
                     - hitting_time(field, t, pts - e, t, z0, rho1, max_step=step).gamma_time) / (2 * fd)
    both = ok & np.all(np.isfinite(fdg), axis=1)
    grad_rel = float(np.max(np.abs(fdg[both] - rec.grad[both])) / np.max(np.abs(rec.grad[both])))
    lo, hi = max(0.0, t - t_fd), min(T, t + t_fd)
    fdt = (hitting_time(field, hi, pts, t, z0, rho1, max_step=step).gamma_time
           - hitting_time(field, lo, pts, t, z0, rho1, max_step=step).gamma_time) / (hi - lo)
    both_t = ok & np.isfinite(fdt)
    dt_abs = float(np.max(np.abs(fdt[both_t] - rec.dt[both_t])))
    transv = float(np.min(rec.transversality[ok]))
    defect = float(np.max(rec.defect[ok]))
    report = {
        "rho0": rho0,
        "delta3": delta3,
        "rho1": rho1,
        "eta": eta,
        "psi_rel_error": psi_rel,
        "hitting_defined": int(ok.sum()),
        "hitting_points": int(n_points),
        "hitting_defect_max": defect,
        "grad_rel_error": grad_rel,
        "dt_abs_error": dt_abs,
        "dt_scale": float(np.max(np.abs(rec.dt[ok]))),
        "transversality_min": transv,
        "cos_theta1": float(np.cos(theta1)),
        "window_min_dot": trans["min_dot"],
    }
    report["pass"] = bool(psi_rel < 1e-3 and defect <= 1e-9 and grad_rel < 1e-3
                          and transv >= np.cos(theta1) - 1e-6 and ok.sum() > 0)
    return report
