"""Pathwise-uniqueness harness: pairs of discretized reflected paths under common noise.

Two different convergent discretizations stand in for two solutions.  The
harness measures their gap along a dt ladder, evaluates the Ito
decomposition of F_eps = Z f_eps along the pair, and checks the sign of the
boundary part A1 at every reflection event.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, HypothesisViolated, InvalidRange
from .fields import DriftField
from .geometry import as_points, boundary_normal
from .sde import BrownianPath, ReflectedPath, simulate_reflected, simulate_transformed
from .testfns import GlobalBoundaryFunction, PairFunction

SCHEME_KINDS = ("projection", "penalization", "transformed")
DEFAULT_DT_LADDER = tuple(2.0 ** -k for k in range(6, 11))
DEFAULT_EPS_LADDER = (1e-1, 1e-2, 1e-3)


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = "projection"
    substeps: int = 1
    penalty: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise DomainError(f"unknown scheme '{self.kind}'")
        if int(self.substeps) < 1:
            raise InvalidRange("substeps must be at least 1")

    @property
    def label(self):
        return f"{self.kind}x{self.substeps}"

    def run(self, drift: DriftField, x0, T, path: BrownianPath, dt, transform=None) -> ReflectedPath:
        if self.kind == "transformed":
            if transform is None:
                raise DomainError("the transformed scheme needs a transform")
            return simulate_transformed(transform, x0, T, path, dt, self.substeps)
        return simulate_reflected(self.kind, drift, x0, T, path, dt, self.substeps, self.penalty)


@dataclass
class PairExperiment:
    """Two scheme legs driven by the same Brownian path.

    ``x0_b`` defaults to ``x0``; a different start is allowed because the
    sign of A1 is a property of each reflection event, not of the initial
    condition.
    """

    drift: DriftField
    scheme_a: SchemeConfig
    scheme_b: SchemeConfig
    x0: np.ndarray
    T: float
    seed: int
    dt_ladder: tuple = DEFAULT_DT_LADDER
    eps: float = 0.1
    lam: float | None = None
    transform: object = None
    x0_b: np.ndarray | None = None

    def __post_init__(self):
        if not self.dt_ladder:
            raise InvalidRange("dt ladder is empty")
        self.dt_ladder = tuple(sorted((float(d) for d in self.dt_ladder), reverse=True))
        self.x0 = as_points(self.x0, self.dim)[0][0]
        self.x0_b = self.x0.copy() if self.x0_b is None else as_points(self.x0_b, self.dim)[0][0]

    @property
    def dim(self):
        return self.drift.domain.dim

    def brownian(self, n_paths, first_path=0):
        return BrownianPath(self.seed, self.T, self.dt_ladder[0], self.dim, n_paths, first_path)

    def legs(self, dt, path: BrownianPath):
        """Both legs at outer step dt; states are subsampled onto the common grid of step dt."""
        ra = self.scheme_a.run(self.drift, self.x0, self.T, path, dt, self.transform)
        rb = self.scheme_b.run(self.drift, self.x0_b, self.T, path, dt, self.transform)
        return ra, rb, ra.X[:: self.scheme_a.substeps], rb.X[:: self.scheme_b.substeps]


def _paired_mean(samples):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(len(samples)) if len(samples) > 1 else 0.0
    return float(samples.mean()), float(se)


def pathwise_gap(exp: PairExperiment, n_paths, power=0.25, z=1.96, first_path=0):
    """E sup_t |X_t - X~_t|^power on every rung of the dt ladder.

    Monotonicity between consecutive rungs is judged on the paired
    difference of the per-path samples (the rungs share their noise), so a
    rung may exceed the previous one by at most z standard errors.
    """
    path = exp.brownian(n_paths, first_path)
    rows, samples = [], []
    for dt in exp.dt_ladder:
        _, _, xa, xb = exp.legs(dt, path)
        s = np.max(np.linalg.norm(xa - xb, axis=2), axis=0) ** power
        samples.append(s)
        mean, se = _paired_mean(s)
        rows.append({"dt": dt, "mean": mean, "stderr": se, "ci_low": mean - z * se, "ci_high": mean + z * se,
                     "paths": int(n_paths)})
    steps = []
    for k in range(1, len(samples)):
        mean, se = _paired_mean(samples[k] - samples[k - 1])
        steps.append({"from_dt": exp.dt_ladder[k - 1], "to_dt": exp.dt_ladder[k], "change": mean, "stderr": se,
                      "nonincreasing": bool(mean <= z * se)})
    means = np.array([r["mean"] for r in rows])
    dts = np.array(exp.dt_ladder)
    order = float(np.polyfit(np.log(dts), np.log(means), 1)[0]) if np.all(means > 0) and len(dts) > 1 else None
    return {
        "scheme_a": exp.scheme_a.label,
        "scheme_b": exp.scheme_b.label,
        "power": power,
        "rows": rows,
        "steps": steps,
        "decay_order": order,
        "monotone": all(s["nonincreasing"] for s in steps),
        "finest_over_coarsest": float(means[-1] / means[0]) if means[0] > 0 else 0.0,
        "halved": bool(means[-1] <= 0.5 * means[0]),
    }


# -- Lyapunov decomposition -----------------------------------------------------------------------


@dataclass
class LyapunovTrace:
    """F_eps = Z f_eps along a discrete pair and the pieces of its decomposition.

    ``M``, ``A1``, ``A2`` and ``residual`` are cumulative with shape
    (steps + 1, paths); ``increments`` holds the per-step pieces.  ``events``
    lists every step where either leg reflected, with the split
    A1 increment = Z * (term_f - lam * term_H) evaluated at the post-step
    boundary states, which lets the sign be re-examined at any lam.
    """

    times: np.ndarray
    F: np.ndarray
    logZ: np.ndarray
    M: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    residual: np.ndarray
    gap_sq: np.ndarray
    C: np.ndarray
    eps: float
    lam: float
    events: dict
    increments: dict = field(default_factory=dict)

    @property
    def Z(self):
        return np.exp(self.logZ)


class _PairLyapunov:
    def __init__(self, H: GlobalBoundaryFunction, pf: PairFunction, lam, t_step=1e-6):
        self.H = H
        self.pf = pf
        self.tr = pf.tr
        self.lam = float(lam)
        self.t_step = t_step

    def _H_at(self, t, x, y, want_grad=False, want_dt=False):
        n = len(x)
        pts = self.tr(t, np.concatenate([x, y]))
        val, grad, dt = self.H.evaluate(t, pts, want_grad, want_dt)
        split = lambda a: (None, None) if a is None else (a[:n], a[n:])  # noqa: E731
        return split(val), split(grad), split(dt)

    def value(self, t, x, y):
        (hx, hy), _, _ = self._H_at(t, x, y)
        logz = -self.lam * (hx + hy)
        return np.exp(logz) * self.pf(t, x, y), logz

    def full(self, t, x, y, want_dt=True):
        """Phi, Z, grad_x Phi, grad_y Phi, d_t Phi and the pieces used by the event split."""
        (hx, hy), (gHx, gHy), (dHx, dHy) = self._H_at(t, x, y, True, want_dt)
        f, gx, gy, _ = self.pf.gradients(t, x, y)
        Jx = self.tr.jacobian(t, x)
        Jy = self.tr.jacobian(t, y)
        logz = -self.lam * (hx + hy)
        z = np.exp(logz)
        dHx_pull = np.einsum("nij,ni->nj", Jx, gHx)
        dHy_pull = np.einsum("nij,ni->nj", Jy, gHy)
        out = {
            "phi": z * f, "logZ": logz, "f": f, "gx": gx, "gy": gy, "Hx": hx, "Hy": hy,
            "dHx": dHx_pull, "dHy": dHy_pull,
            "grad_x": z[:, None] * (gx - self.lam * f[:, None] * dHx_pull),
            "grad_y": z[:, None] * (gy - self.lam * f[:, None] * dHy_pull),
        }
        if want_dt:
            T = self.tr.T
            lo, hi = max(0.0, t - self.t_step), min(T, t + self.t_step)
            df = (self.pf(hi, x, y) - self.pf(lo, x, y)) / (hi - lo)
            dux = self.tr.time_derivative(t, x)
            duy = self.tr.time_derivative(t, y)
            dH = dHx + np.sum(gHx * dux, axis=1) + dHy + np.sum(gHy * duy, axis=1)
            out["dt"] = z * (df - self.lam * f * dH)
            out["dHdt_x"], out["dHdt_y"] = dHx, dHy
        return out

    def common_laplacian(self, t, x, y, step=1e-4):
        """sum_i (d_{x_i} + d_{y_i})^2 Phi by central differences of values."""
        d = x.shape[1]
        n = len(x)
        shifts = []
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            shifts += [e, -e]
        xs = np.concatenate([x + s for s in shifts])
        ys = np.concatenate([y + s for s in shifts])
        vals, _ = self.value(t, xs, ys)
        base, _ = self.value(t, x, y)
        vals = vals.reshape(2 * d, n)
        return np.sum(vals[0::2] + vals[1::2] - 2.0 * base, axis=0) / step**2


def lyapunov_trace(exp: PairExperiment, H: GlobalBoundaryFunction, pf: PairFunction, n_paths, dt=None,
                   lam=None, first_path=0, events_only=False):
    """Evaluate the decomposition of F_eps(t, X_t, X~_t) along discrete pairs.

    Per step [t_k, t_{k+1}] the unconstrained move contributes
      M   += (grad_x Phi + grad_y Phi) . dW          (left point),
      A2  += d_t Phi dt + (grad_x Phi . b + grad_y Phi . b~) dt
             + 1/2 sum_i (d_{x_i} + d_{y_i})^2 Phi dt,
    and the push onto the boundary contributes
      A1  += grad_x Phi . dL + grad_y Phi . dL~     (gradient at the midpoint of the push).
    C accumulates (1 + |b(X)| + |d_t H(u(X))| + |d_t H(u(X~))|) dt.
    Both legs must keep their states in the closure with one substep.  With
    ``events_only`` only the reflection events are evaluated and the
    cumulative terms stay zero.
    """
    for cfg in (exp.scheme_a, exp.scheme_b):
        if cfg.kind == "penalization" or cfg.substeps != 1:
            raise DomainError("the Lyapunov trace needs closure-valued legs with one substep")
    lam = exp.lam if lam is None else lam
    if lam is None:
        raise DomainError("lambda is not set")
    dt = exp.dt_ladder[-1] if dt is None else dt
    pf = pf.with_eps(exp.eps)
    path = exp.brownian(n_paths, first_path)
    ra, rb, xa, xb = exp.legs(dt, path)
    ev = _PairLyapunov(H, pf, lam)
    K = len(ra.times) - 1
    n = n_paths
    F = np.zeros((K + 1, n))
    logZ = np.zeros((K + 1, n))
    gap_sq = np.sum((xa - xb) ** 2, axis=2)
    dM, dA1, dA2, dC = (np.zeros((K, n)) for _ in range(4))
    events = {key: [] for key in ("step", "path", "logZ", "term_f", "term_H", "H_sum", "gap_sq")}
    drift = exp.drift
    for k in range(K + 1):
        t = ra.times[k]
        x, y = ra.X[k], rb.X[k]
        if events_only:
            pass
        elif k == K:
            F[k], logZ[k] = ev.value(t, x, y)
        else:
            s = ev.full(t, x, y)
            F[k], logZ[k] = s["phi"], s["logZ"]
            dM[k] = np.sum((s["grad_x"] + s["grad_y"]) * ra.dW[k], axis=1)
            bx, by = drift(t, x), drift(t, y)
            lap = ev.common_laplacian(t, x, y)
            dA2[k] = (s["dt"] + np.sum(s["grad_x"] * bx + s["grad_y"] * by, axis=1) + 0.5 * lap) * dt
            dC[k] = (1.0 + np.linalg.norm(bx, axis=1) + np.abs(s["dHdt_x"]) + np.abs(s["dHdt_y"])) * dt
        if k == K:
            break
        refl = (ra.dLtot[k] > 0) | (rb.dLtot[k] > 0)
        if not np.any(refl):
            continue
        t1 = ra.times[k + 1]
        xp, yp = ra.X[k + 1][refl], rb.X[k + 1][refl]
        if not events_only:
            mid_x = 0.5 * (ra.X_pre[k][refl] + xp)
            mid_y = 0.5 * (rb.X_pre[k][refl] + yp)
            m = ev.full(t1, mid_x, mid_y, want_dt=False)
            dA1[k, refl] = (np.sum(m["grad_x"] * ra.dL[k][refl], axis=1)
                            + np.sum(m["grad_y"] * rb.dL[k][refl], axis=1))
        # split event values at the boundary states themselves
        b = ev.full(t1, xp, yp, want_dt=False)
        la, lb = ra.dLtot[k][refl], rb.dLtot[k][refl]
        nx = _normals_where(pf.domain, xp, la > 0)
        ny = _normals_where(pf.domain, yp, lb > 0)
        term_f = np.sum(b["gx"] * nx, axis=1) * la + np.sum(b["gy"] * ny, axis=1) * lb
        term_H = b["f"] * (np.sum(b["dHx"] * nx, axis=1) * la + np.sum(b["dHy"] * ny, axis=1) * lb)
        idx = np.nonzero(refl)[0]
        events["step"].append(np.full(len(idx), k))
        events["path"].append(idx + first_path)
        events["logZ"].append(b["logZ"])
        events["term_f"].append(term_f)
        events["term_H"].append(term_H)
        events["H_sum"].append(b["Hx"] + b["Hy"])
        events["gap_sq"].append(np.sum((xp - yp) ** 2, axis=1))
    events = {key: (np.concatenate(v) if v else np.zeros(0)) for key, v in events.items()}
    dR = np.diff(F, axis=0) - dM - dA1 - dA2
    cum = lambda a: np.concatenate([np.zeros((1, n)), np.cumsum(a, axis=0)])  # noqa: E731
    return LyapunovTrace(ra.times, F, logZ, cum(dM), cum(dA1), cum(dA2), cum(dR), gap_sq, cum(dC), pf.eps,
                         float(lam), events, {"M": dM, "A1": dA1, "A2": dA2, "residual": dR, "C": dC})


def _normals_where(dom, x, mask):
    out = np.zeros_like(x)
    if np.any(mask):
        out[mask] = boundary_normal(dom, x[mask])
    return out


def trace_summary(trace: LyapunovTrace, M7=None):
    """Residual statistics and the invariants checked along one trace."""
    r = trace.residual[-1]
    mean = float(r.mean())
    se = float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0
    out = {
        "eps": trace.eps,
        "lambda": trace.lam,
        "dt": float(trace.times[1] - trace.times[0]),
        "paths": int(trace.F.shape[1]),
        "residual_mean": mean,
        "residual_stderr": se,
        "residual_within_3se": bool(abs(mean) <= 3 * se + 1e-15),
        "residual_abs_max": float(np.max(np.abs(r))),
        "A1_final_max": float(trace.A1[-1].max()),
        "A2_final_mean": float(trace.A2[-1].mean()),
        "logZ_min": float(trace.logZ.min()),
        "logZ_max": float(trace.logZ.max()),
        "Z_in_unit_interval": bool(np.all(np.isfinite(trace.logZ) & (trace.logZ <= 0.0))),
        "reflection_events": int(len(trace.events["step"])),
    }
    if M7 is not None:
        lower = M7 * trace.Z * trace.gap_sq / trace.eps
        # F = Z f; compare f with its lower bound where Z underflows
        lower = np.where(trace.Z > 0, lower, 0.0)
        slack = trace.F - lower
        out["gap_scaling_violations"] = int(np.sum(slack < -1e-12 * np.maximum(1.0, trace.F)))
    return out


def sign_check_A1(traces, lam=None, tol=1e-8):
    """Fraction of reflection events whose A1 increment is positive beyond tol * scale.

    The increment at an event is Z * (term_f - lam * term_H) with
    Z = exp(-lam * H_sum) > 0, so its sign is that of the bracket; the
    bracket is what is tested (Z underflows at large lam).  ``scale`` is
    the largest |term_f| + lam |term_H| over all events.  lam = 0 is the
    ablation without the boundary function H.
    """
    if isinstance(traces, LyapunovTrace):
        traces = [traces]
    vals, mags = [], []
    lams = set()
    for tr in traces:
        e = tr.events
        use = tr.lam if lam is None else float(lam)
        lams.add(use)
        vals.append(e["term_f"] - use * e["term_H"])
        mags.append(np.abs(e["term_f"]) + use * np.abs(e["term_H"]))
    v = np.concatenate(vals) if vals else np.zeros(0)
    m = np.concatenate(mags) if mags else np.zeros(0)
    scale = float(m.max()) if m.size else 0.0
    bad = v > tol * scale
    n = int(v.size)
    return {
        "events": n,
        "violations": int(bad.sum()),
        "fraction": float(bad.mean()) if n else 0.0,
        "max_bracket": float(v.max()) if n else 0.0,
        "scale": scale,
        "lambda": sorted(lams),
        "ablation": all(x == 0.0 for x in lams),
        "pass": bool(not bad.any()),
    }


# -- stochastic Gronwall --------------------------------------------------------------------------


def gronwall_prefactor(p, q):
    return (p / (p - q)) ** (1.0 / q)


def stochastic_gronwall_bound(xi, eta, A, M=None, p=0.5, q=0.25, R=None, tol=1e-9):
    """Both sides of the stochastic Gronwall bound over discrete paths of shape (steps + 1, paths).

    lhs = (E (xi*)^q)^{1/q},  rhs = (p/(p-q))^{1/q} (E exp(p A / (1-p)))^{(1-p)/p} E eta*,
    with sups and A taken up to tau_R = first step with A >= R (or the end).
    When M is given, xi_t <= eta_t + sum_{s<t} xi_s dA_s + M_t is checked per
    path first.
    """
    if not 0 < q < p < 1:
        raise InvalidRange("need 0 < q < p < 1")
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    A = np.asarray(A, dtype=float)
    if xi.ndim == 1:
        xi, eta, A = xi[:, None], eta[:, None], A[:, None]
        M = None if M is None else np.asarray(M, dtype=float)[:, None]
    if np.any(xi < -tol) or np.any(eta < -tol):
        raise HypothesisViolated("xi and eta must be nonnegative")
    dA = np.diff(A, axis=0)
    if np.any(np.abs(A[0]) > tol) or np.any(dA < -tol):
        raise HypothesisViolated("A must start at 0 and be nondecreasing")
    if M is not None:
        M = np.asarray(M, dtype=float)
        integral = np.concatenate([np.zeros((1, xi.shape[1])), np.cumsum(xi[:-1] * dA, axis=0)])
        excess = xi - (eta + integral + M)
        scale = tol * np.maximum(1.0, np.abs(xi) + np.abs(eta) + np.abs(integral) + np.abs(M))
        if np.any(excess > scale):
            k, j = np.unravel_index(np.argmax(excess - scale), excess.shape)
            raise HypothesisViolated(f"xi exceeds eta + int xi dA + M by {excess[k, j]:.3e} (step {k}, path {j})")
    steps = xi.shape[0]
    if R is None:
        stop = np.full(xi.shape[1], steps - 1)
    else:
        hit = A >= R
        stop = np.where(hit.any(axis=0), np.argmax(hit, axis=0), steps - 1)
    live = np.arange(steps)[:, None] <= stop[None, :]
    xi_star = np.max(np.where(live, xi, -np.inf), axis=0)
    eta_star = np.max(np.where(live, eta, -np.inf), axis=0)
    A_tau = A[stop, np.arange(xi.shape[1])]
    a = xi_star ** q
    with np.errstate(over="ignore"):
        e = np.exp(p * A_tau / (1.0 - p))
    n = xi.shape[1]
    lhs = float(a.mean() ** (1.0 / q))
    pref = gronwall_prefactor(p, q)
    rhs = float(pref * e.mean() ** ((1.0 - p) / p) * eta_star.mean())

    def rel_se(v):
        if n < 2 or v.mean() == 0 or not np.all(np.isfinite(v)):
            return 0.0
        return float(v.std(ddof=1) / np.sqrt(n) / abs(v.mean()))

    sigma = float(np.sqrt((rel_se(a) / q) ** 2 + rel_se(eta_star) ** 2 + ((1.0 - p) / p * rel_se(e)) ** 2))
    return {"lhs": lhs, "rhs": rhs, "prefactor": pref, "sigma": sigma, "p": p, "q": q,
            "pass": bool(lhs <= rhs * (1.0 + 3.0 * sigma))}


def gronwall_inputs(trace: LyapunovTrace, M7=None):
    """(xi, eta, A, M) from a trace.

    xi is M7 Z |X - X~|^2 / eps (or F_eps without M7), A the running C
    proxy, M the martingale part, and eta = F_eps(0) plus the running sum of
    the positive part of each step's non-martingale increment beyond xi dA.
    """
    inc = trace.increments
    xi = trace.F if M7 is None else M7 * trace.Z * trace.gap_sq / trace.eps
    drive = inc["A1"] + inc["A2"] + inc["residual"] - xi[:-1] * inc["C"]
    n = trace.F.shape[1]
    eta = trace.F[0][None, :] + np.concatenate([np.zeros((1, n)), np.cumsum(np.maximum(drive, 0.0), axis=0)])
    return xi, eta, trace.C, trace.M
