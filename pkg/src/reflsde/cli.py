"""Command-line orchestration: config parsing, shared ledger, deterministic reports.

Every command writes ``<command>.json`` (deterministic, with the ledger
snapshot it used) and ``<command>.meta.json`` (timings and environment).
Exit codes: 0 when every check passes, 2 when a property check fails, 1 on
errors.
"""
from __future__ import annotations

import contextlib
import json
import os
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, HypothesisViolated, MissingConstant, PropertyViolation, ReflectsdeError
from .fields import DRIFT_PRESETS, make_drift, save_field
from .geometry import DomainSpec
from .io import atomic_write_text, dumps17, write_csv

OUTPUT_ENV = "REFLSDE_OUTPUT_DIR"
DOMAIN_KINDS = ("interval", "disk")
COMMANDS = ("pde-solve", "transform-verify", "flow", "testfn-verify", "simulate", "krylov", "uniqueness", "report")

# section -> {key: default}; None means "no default"
SCHEMA = {
    "domain": {"kind": "disk", "params": None},
    "drift": {"preset": "zero", "bound": 1.0, "vector": None, "mid": None, "cell": 0.5, "jump_radius": None},
    "resolution": {"h": 2.0**-7, "dt": 2.0**-10, "n_angle": 0, "mollify_level": None},
    "horizon": {"T": "auto", "candidates": None},
    "seeds": {"seed": None},
    "ladders": {"dt": [2.0**-k for k in range(6, 11)], "eps": [1e-1, 1e-2, 1e-3]},
    "output": {"dir": "out", "ledger": "ledger.json"},
    "transform": {"det_band": [0.45, 2.1], "samples": 10_000, "max_lipschitz_ratio": 10.0},
    "flow": {"points": 100},
    "testfn": {"delta5": 0.1, "bump_radius": 0.05, "eta3": None, "g_samples": 100_000, "pair_samples": 10_000,
               "boundary_samples": 10_000, "held_out": 1000},
    "simulate": {"scheme": "projection", "x0": None, "T": 1.0, "dt": 2.0**-6, "substeps": 1, "paths": None,
                 "trajectories": False},
    "krylov": {"x0": None, "T": 1.0, "dt": 2.0**-6, "paths": 10_000, "widths": [0.1, 0.05, 0.025],
               "positions": 9},
    "uniqueness": {"scheme_a": {"kind": "projection"}, "scheme_b": {"kind": "projection", "substeps": 2},
                   "x0": None, "x0_b": None, "gap_T": 1.0, "paths": None, "power": 0.25,
                   "sign_schemes": [{"kind": "projection"}, {"kind": "transformed"}], "sign_dt": 2.0**-8,
                   "sign_eps": [1e-1, 1e-2], "residual_dt": [2.0**-6, 2.0**-8], "residual_paths": 200,
                   "residual_lambda": 0.0, "R": None, "trace_T": None},
}
MONTE_CARLO = ("simulate", "krylov", "uniqueness")


# -- configuration -------------------------------------------------------------------------------


def _line_of(text, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it, when present."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return no
    return None


@dataclass
class ExperimentConfig:
    sections: dict
    text: str = ""
    source: Path | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.sections[section][key]

    def fail(self, message, dotted):
        section, _, key = dotted.partition(".")
        line = _line_of(self.text, section, key or None) if self.text else None
        return ConfigError(message, key=dotted, line=line)

    def domain(self) -> DomainSpec:
        kind = self["domain.kind"]
        params = self["domain.params"]
        if params is None:
            params = [0.0, 1.0] if kind == "interval" else [1.0]
        try:
            return DomainSpec(kind, tuple(float(p) for p in params))
        except (ValueError, TypeError) as exc:
            raise self.fail(str(exc), "domain.params") from None

    def drift(self, domain=None):
        d = self.sections["drift"]
        domain = domain or self.domain()
        kw = {k: d[k] for k in ("vector", "mid", "jump_radius") if d[k] is not None}
        try:
            return make_drift(domain, d["preset"], bound=d["bound"], cell=d["cell"], **kw)
        except ReflectsdeError as exc:
            raise self.fail(str(exc), "drift.preset") from None
        except ValueError as exc:
            raise self.fail(str(exc), "drift.vector") from None

    def seed(self, override=None):
        if override is not None:
            return int(override)
        if self["seeds.seed"] is None:
            raise self.fail("a seed is required for Monte Carlo commands", "seeds.seed")
        return int(self["seeds.seed"])

    def canonical(self):
        """Config contents that determine results (the output location does not)."""
        return {k: v for k, v in self.sections.items() if k != "output"}


def parse_config(text, source=None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", line=int(m.group(1)) if m else None) from None
    sections = {}
    for name, value in raw.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]", key=name, line=_line_of(text, name))
        if not isinstance(value, dict):
            raise ConfigError("expected a table", key=name, line=_line_of(text, name))
        for key in value:
            if key not in SCHEMA[name]:
                raise ConfigError("unknown key", key=f"{name}.{key}", line=_line_of(text, name, key))
    for name, defaults in SCHEMA.items():
        sec = dict(defaults)
        sec.update(raw.get(name, {}))
        sections[name] = sec
    cfg = ExperimentConfig(sections, text, Path(source) if source else None)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, path)


def _positive(cfg, dotted, integer=False, allow_none=False):
    v = cfg[dotted]
    if v is None and allow_none:
        return
    kinds = (int,) if integer else (int, float)
    if isinstance(v, bool) or not isinstance(v, kinds) or not v > 0:
        raise cfg.fail("must be a positive " + ("integer" if integer else "number"), dotted)


def _ladder(cfg, dotted):
    v = cfg[dotted]
    if not isinstance(v, list) or not v:
        raise cfg.fail("ladder must be a nonempty list", dotted)
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in v):
        raise cfg.fail("ladder entries must be positive numbers", dotted)


def _scheme(cfg, dotted, value):
    from .uniqueness import SCHEME_KINDS

    if not isinstance(value, dict) or value.get("kind") not in SCHEME_KINDS:
        raise cfg.fail(f"scheme must be a table with kind in {SCHEME_KINDS}", dotted)
    unknown = set(value) - {"kind", "substeps", "penalty"}
    if unknown:
        raise cfg.fail(f"unknown scheme keys {sorted(unknown)}", dotted)


def validate(cfg: ExperimentConfig):
    if cfg["domain.kind"] not in DOMAIN_KINDS:
        raise cfg.fail(f"domain kind must be one of {DOMAIN_KINDS}", "domain.kind")
    if cfg["drift.preset"] not in DRIFT_PRESETS:
        raise cfg.fail(f"unknown drift preset; choose from {DRIFT_PRESETS}", "drift.preset")
    dom = cfg.domain()
    cfg.drift(dom)
    for key in ("resolution.h", "resolution.dt", "simulate.T", "simulate.dt", "krylov.T", "krylov.dt",
                "uniqueness.gap_T", "uniqueness.sign_dt", "uniqueness.power", "testfn.delta5",
                "testfn.bump_radius"):
        _positive(cfg, key)
    for key in ("testfn.eta3", "uniqueness.trace_T", "uniqueness.R"):
        _positive(cfg, key, allow_none=True)
    for key in ("transform.samples", "flow.points", "testfn.g_samples", "testfn.pair_samples",
                "testfn.boundary_samples", "testfn.held_out", "simulate.substeps", "krylov.paths",
                "krylov.positions", "uniqueness.residual_paths"):
        _positive(cfg, key, integer=True)
    for key in ("simulate.paths", "uniqueness.paths"):
        _positive(cfg, key, integer=True, allow_none=True)
    for key in ("ladders.dt", "ladders.eps", "krylov.widths", "uniqueness.sign_eps", "uniqueness.residual_dt"):
        _ladder(cfg, key)
    T = cfg["horizon.T"]
    if T != "auto":
        _positive(cfg, "horizon.T")
    if cfg["horizon.candidates"] is not None:
        _ladder(cfg, "horizon.candidates")
    band = cfg["transform.det_band"]
    if not (isinstance(band, list) and len(band) == 2 and 0 < band[0] < band[1]):
        raise cfg.fail("det_band must be [low, high] with 0 < low < high", "transform.det_band")
    seed = cfg["seeds.seed"]
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise cfg.fail("seed must be a nonnegative integer", "seeds.seed")
    from .uniqueness import SCHEME_KINDS

    if cfg["simulate.scheme"] not in SCHEME_KINDS:
        raise cfg.fail(f"scheme must be one of {SCHEME_KINDS}", "simulate.scheme")
    _scheme(cfg, "uniqueness.scheme_a", cfg["uniqueness.scheme_a"])
    _scheme(cfg, "uniqueness.scheme_b", cfg["uniqueness.scheme_b"])
    pair = cfg["uniqueness.sign_schemes"]
    if not isinstance(pair, list) or len(pair) != 2:
        raise cfg.fail("sign_schemes must list two schemes", "uniqueness.sign_schemes")
    for s in pair:
        _scheme(cfg, "uniqueness.sign_schemes", s)
    for key in ("simulate.x0", "krylov.x0", "uniqueness.x0", "uniqueness.x0_b"):
        x = cfg[key]
        if x is None:
            continue
        pt = np.atleast_1d(np.asarray(x, dtype=float))
        if pt.shape != (dom.dim,) or not dom.contains(pt[None, :])[0]:
            raise cfg.fail(f"must be a point of the closed {dom.kind}", key)


# -- run context ----------------------------------------------------------------------------------


class Run:
    """Output paths, ledger and timings for one command invocation."""

    def __init__(self, command, cfg: ExperimentConfig, out_dir=None, threads=None):
        from .zvonkin import ConstantsLedger

        self.command = command
        self.cfg = cfg
        base = cfg.source.parent if cfg.source else Path.cwd()
        env = os.environ.get(OUTPUT_ENV)
        out = Path(out_dir or env or cfg["output.dir"])
        self.out = out if out.is_absolute() else (Path.cwd() / out if (out_dir or env) else base / out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger = ConstantsLedger.load(self.out / cfg["output.ledger"])
        self.threads = threads
        self.timings = {}
        self._t0 = time.perf_counter()

    @contextlib.contextmanager
    def timed(self, name):
        t = time.perf_counter()
        yield
        self.timings[name] = time.perf_counter() - t

    def path(self, name):
        return self.out / name

    def T(self):
        T = self.cfg["horizon.T"]
        if T != "auto":
            return float(T)
        if "T1" not in self.ledger:
            raise MissingConstant("horizon T = 'auto' needs T1 in the ledger; run transform-verify first")
        return float(self.ledger.get("T1"))

    def finish(self, checks, extra=None):
        passed = all(c.get("pass", True) for c in checks.values())
        report = {
            "command": self.command,
            "config": self.cfg.canonical(),
            "ledger": self.ledger.snapshot(),
            "checks": checks,
            "pass": bool(passed),
        }
        if extra:
            report.update(extra)
        self.ledger.save()
        atomic_write_text(self.path(f"{self.command}.json"), dumps17(report) + "\n")
        meta = {
            "command": self.command,
            "timings": dict(self.timings, total=time.perf_counter() - self._t0),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "threads": self.threads,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        atomic_write_text(self.path(f"{self.command}.meta.json"), dumps17(meta) + "\n")
        return report


def _transform(run: Run, T=None):
    from .zvonkin import build_transform

    cfg = run.cfg
    T = run.T() if T is None else T
    with run.timed("transform"):
        return build_transform(cfg.drift(), T, cfg["resolution.h"], cfg["resolution.dt"],
                               cfg["resolution.n_angle"], cfg["resolution.mollify_level"])


def _default_x0(dom: DomainSpec):
    return np.array([0.5 * sum(dom.params)]) if dom.kind == "interval" else np.zeros(2)


def _point(cfg, key, dom):
    x = cfg[key]
    return _default_x0(dom) if x is None else np.atleast_1d(np.asarray(x, dtype=float))


def _theta1(run: Run):
    from .zvonkin import solve_kappa, solve_theta1

    theta0 = run.ledger.require("theta0")
    if "theta1" not in run.ledger:
        run.ledger.set("theta1", solve_theta1(theta0), "verified", "largest angle meeting the four inequalities")
    theta1 = run.ledger.get("theta1")
    if "kappa" not in run.ledger:
        run.ledger.set("kappa", solve_kappa(theta1, theta0), "verified", "midway through the feasible kappa range")
    return theta0, theta1


# -- commands -----------------------------------------------------------------------------------


def cmd_pde_solve(run: Run):
    from .pde import ParabolicProblem, holder_estimate, solve_neumann_terminal

    cfg = run.cfg
    drift = cfg.drift()
    T = float(cfg["horizon.T"]) if cfg["horizon.T"] != "auto" else float(run.ledger.get("T1", 1.0))
    problem = ParabolicProblem(drift, T, cfg["resolution.h"], cfg["resolution.dt"], cfg["resolution.n_angle"],
                               cfg["resolution.mollify_level"])
    with run.timed("solve"):
        sol = solve_neumann_terminal(problem)
    save_field(sol.field, run.path("u_field.bin"))
    dom = drift.domain
    rng = np.random.default_rng(0)
    pts = dom.sample_inside(rng, 2000)
    checks = {"linear_solve": {"max_residual": sol.max_residual, "pass": bool(sol.max_residual < 1e-6)}}
    if drift.preset in ("zero", "constant"):
        shift = drift.vector if drift.preset == "constant" else np.zeros(dom.dim)
        err = max(float(np.max(np.abs(sol.field(t, pts) - (pts + (T - t) * shift))))
                  for t in np.linspace(0.0, T, 9))
        tol = 1e-10 if drift.preset == "zero" else 1e-6
        checks["exact_solution"] = {"max_error": err, "tolerance": tol, "pass": bool(err <= tol)}
    else:
        alpha0, M0, degenerate = holder_estimate(sol.field)
        checks["time_modulus"] = {"alpha0": alpha0, "M0": M0, "degenerate": degenerate}
    return run.finish(checks, {"T": T, "steps": sol.steps, "drift_used": sol.drift_used,
                               "field_file": "u_field.bin"})


def cmd_transform_verify(run: Run):
    from .zvonkin import determinant_sweep, select_T1

    cfg = run.cfg
    drift = cfg.drift()
    T = cfg["horizon.T"]
    cands = [float(T)] if T != "auto" else cfg["horizon.candidates"]
    n = cfg["transform.samples"]
    seed = cfg["seeds.seed"] or 0
    with run.timed("select"):
        bundle = select_T1(drift, cands, cfg["resolution.h"], cfg["resolution.dt"], cfg["resolution.n_angle"],
                           cfg["resolution.mollify_level"], n, n, run.ledger, seed)
    band = tuple(cfg["transform.det_band"])
    det = determinant_sweep(bundle.transform, n, seed=seed, band=band)
    lip = bundle.reports["bilipschitz"]
    ratio = lip["M2"] / lip["M1"] if lip["M1"] > 0 else float("inf")
    cone = bundle.reports["cone"]
    close = bundle.reports["close_pairs"]
    checks = {
        "determinant_band": dict(det, **{"pass": det["violations"] == 0}),
        "bilipschitz": dict(lip, ratio=ratio, pass_limit=cfg["transform.max_lipschitz_ratio"],
                            **{"pass": bool(lip["M1"] > 0 and ratio < cfg["transform.max_lipschitz_ratio"])}),
        "cone_conditions": dict(cone, **{"pass": cone["violations"] == 0}),
        "close_pairs": dict(close, **{"pass": close["violations"] == 0}),
    }
    return run.finish(checks, {"T1": run.ledger.get("T1"), "horizons_tried": [t["T"] for t in bundle.reports["tried"]],
                               "pde_residual": bundle.reports["pde_residual"]})


def cmd_flow(run: Run):
    from .flows import DirectionField, flow_diagnostics

    cfg = run.cfg
    theta0, theta1 = _theta1(run)
    tr, _ = _transform(run)
    with run.timed("diagnostics"):
        rep = flow_diagnostics(DirectionField(tr), theta1, cfg["flow.points"], seed=cfg["seeds.seed"] or 0)
    for name, note in (("rho0", "largest dyadic r with det psi >= 1/2"),
                       ("delta3", "transversality radius at the reference anchor"),
                       ("eta", "time window paired with delta3")):
        run.ledger.set(name, rep[name], "fitted", note)
    checks = {
        "psi_jacobian": {"rel_error": rep["psi_rel_error"], "pass": rep["psi_rel_error"] < 1e-3},
        "hitting_defect": {"max": rep["hitting_defect_max"], "accepted": rep["hitting_defined"],
                           "pass": rep["hitting_defect_max"] <= 1e-9 and rep["hitting_defined"] > 0},
        "hitting_gradient": {"rel_error": rep["grad_rel_error"], "pass": rep["grad_rel_error"] < 1e-3},
        "hitting_time_derivative": {"abs_error": rep["dt_abs_error"], "scale": rep["dt_scale"]},
        "transversality": {"min": rep["transversality_min"], "cos_theta1": rep["cos_theta1"],
                           "pass": rep["transversality_min"] >= rep["cos_theta1"] - 1e-6},
    }
    return run.finish(checks, {"theta0": theta0, "theta1": theta1})


def _pair_function(run: Run, tr, theta0, eps):
    from .testfns import DupuisG, Omega, PairFunction

    g = DupuisG(theta0)
    g.fit_M5(tr.field.domain.dim)
    return PairFunction(tr, Omega(g), eps)


def _build_H(run: Run, tr, T):
    from .flows import DirectionField
    from .testfns import build_H

    cfg = run.cfg
    _theta1(run)
    run.ledger.set("delta5", cfg["testfn.delta5"], "fitted", "desk-scale chart length")
    eta3 = cfg["testfn.eta3"] if cfg["testfn.eta3"] is not None else T / 2
    with run.timed("build_H"):
        return build_H(DirectionField(tr), run.ledger, delta5=cfg["testfn.delta5"],
                       bump_radius=cfg["testfn.bump_radius"], eta3=eta3)


def cmd_testfn_verify(run: Run):
    from .testfns import DupuisG, boundary_derivative_checks, fit_pair_constants, sandwich_check, verify_H

    cfg = run.cfg
    theta0, _ = _theta1(run)
    T = run.T()
    tr, _ = _transform(run, T)
    dim = tr.field.domain.dim
    g = DupuisG(theta0)
    g.fit_M5(dim)
    with run.timed("dupuis"):
        grep = g.verify(cfg["testfn.g_samples"], dim, seed=0, raise_on_violation=False)
    run.ledger.set("M4", g.M4, "fitted", "min of the profile")
    run.ledger.set("M5", g.M5, "fitted", "grid max of scale-free derivative ratios times 1.01")
    eps_values = tuple(cfg["ladders.eps"])
    pf = _pair_function(run, tr, theta0, eps_values[0])
    with run.timed("pair_constants"):
        const = fit_pair_constants(pf, cfg["testfn.pair_samples"], seed=0, eps_values=eps_values,
                                   times=[0.0, 0.5 * T, T])
    M6, M7 = const["M6"], const["M7"]
    run.ledger.set("M6", M6, "fitted", "1.25 x max training ratio")
    run.ledger.set("M7", M7, "fitted", "0.8 x min training sandwich ratio")
    run.ledger.set("lambda", M6 / M7, "verified", "M6 / M7")
    checks = {"dupuis_g": grep}
    for k, eps in enumerate(eps_values):
        q = pf.with_eps(eps)
        checks[f"sandwich_eps_{eps:g}"] = sandwich_check(q, M6, M7, cfg["testfn.pair_samples"], seed=100 + k)
        checks[f"boundary_bounds_eps_{eps:g}"] = boundary_derivative_checks(
            q, M6=M6, n_samples=cfg["testfn.boundary_samples"], seed=200 + k)
    H = _build_H(run, tr, T)
    with run.timed("verify_H"):
        checks["boundary_function"] = verify_H(H, cfg["testfn.held_out"])
    checks["boundary_function_cover"] = dict(H.report, **{"pass": H.report["annulus_violations"] == 0})
    return run.finish(checks, {"pair_constants": const})


def cmd_simulate(run: Run, paths=None, seed=None):
    from .sde import (
        BrownianPath,
        coordinate_field,
        ito_residual,
        mean_with_error,
        reflection_angles,
        square_norm_field,
    )
    from .uniqueness import SchemeConfig

    cfg = run.cfg
    seed = cfg.seed(seed)
    paths = paths or cfg["simulate.paths"]
    if paths is None:
        raise cfg.fail("number of paths missing (use --paths)", "simulate.paths")
    drift = cfg.drift()
    dom = drift.domain
    scheme = SchemeConfig(cfg["simulate.scheme"], cfg["simulate.substeps"])
    T = cfg["simulate.T"]
    tr = None
    if scheme.kind == "transformed":
        T = run.T()
        tr, _ = _transform(run, T)
    bp = BrownianPath(seed, T, cfg["simulate.dt"], dom.dim, int(paths))
    with run.timed("simulate"):
        rp = scheme.run(drift, _point(cfg, "simulate.x0", dom), T, bp, cfg["simulate.dt"], tr)
    header = ["path", *[f"X_T_{i}" for i in range(dom.dim)], "local_time", "reflections"]
    write_csv(run.path("paths.csv"), header, rp.summary_rows())
    extra = {"paths": int(paths), "seed": seed, "T": T, "paths_file": "paths.csv"}
    if cfg["simulate.trajectories"]:
        data = np.ascontiguousarray(rp.X, dtype="<f8")
        tmp = run.path("trajectories.bin.tmp")
        tmp.write_bytes(data.tobytes())
        os.replace(tmp, run.path("trajectories.bin"))
        side = {"format": "float64-le", "layout": ["step", "path", "component"], "shape": list(data.shape),
                "times": rp.times}
        atomic_write_text(run.path("trajectories.bin.json"), dumps17(side) + "\n")
        extra["trajectories_file"] = "trajectories.bin"
    checks = {}
    if scheme.kind != "transformed":
        for F, name in ((coordinate_field(0, dom.dim), "ito_residual_x0"),
                        (square_norm_field(dom.dim), "ito_residual_square_norm")):
            m, se = mean_with_error(ito_residual(F, rp))
            checks[name] = {"mean": m, "stderr": se, "pass": bool(abs(m) <= 3 * se + 1e-15)}
        ang = reflection_angles(rp)
        checks["reflection_direction"] = {"max_angle": float(ang.max()) if ang.size else 0.0,
                                          "pass": bool(ang.size == 0 or ang.max() <= 1e-6)}
    lt = rp.local_time[-1]
    extra["local_time_mean"] = float(lt.mean())
    extra["reflections_mean"] = float(rp.reflections.mean())
    extra["slack"] = float(rp.slack)
    return run.finish(checks, extra)


def cmd_krylov(run: Run, paths=None, seed=None):
    from .sde import BrownianPath, krylov_family, simulate_reflected

    cfg = run.cfg
    seed = cfg.seed(seed)
    paths = int(paths or cfg["krylov.paths"])
    drift = cfg.drift()
    dom = drift.domain
    T, dt = cfg["krylov.T"], cfg["krylov.dt"]
    bp = BrownianPath(seed, T, dt, dom.dim, paths)
    with run.timed("simulate"):
        rp = simulate_reflected("projection", drift, _point(cfg, "krylov.x0", dom), T, bp, dt)
    with run.timed("family"):
        fam = krylov_family(rp, dom, tuple(cfg["krylov.widths"]), cfg["krylov.positions"])
    run.ledger.set("M8", max(fam["M8"].values()), "fitted", "largest occupation to L^(d+1) ratio over slabs")
    checks = {"krylov_family": {"M8": fam["M8"], "per_width_max": fam["per_width_max"], "spread": fam["spread"],
                                "pass": fam["pass"]}}
    return run.finish(checks, {"paths": paths, "seed": seed, "constant_f": fam["constant_f"], "slabs": fam["slabs"]})


def cmd_uniqueness(run: Run, paths=None, seed=None):
    from .uniqueness import (
        PairExperiment,
        SchemeConfig,
        gronwall_inputs,
        lyapunov_trace,
        pathwise_gap,
        sign_check_A1,
        stochastic_gronwall_bound,
        trace_summary,
    )

    cfg = run.cfg
    seed = cfg.seed(seed)
    paths = int(paths or cfg["uniqueness.paths"] or 1000)
    theta0 = run.ledger.require("theta0")
    try:
        M6, M7, lam = run.ledger.require("M6", "M7", "lambda")
    except MissingConstant:
        raise MissingConstant("ledger lacks M6, M7 or lambda; run testfn-verify first") from None
    drift = cfg.drift()
    dom = drift.domain
    x0 = _point(cfg, "uniqueness.x0", dom)
    x0_b = None if cfg["uniqueness.x0_b"] is None else _point(cfg, "uniqueness.x0_b", dom)
    checks = {}

    # gap ladder, crossed with the eps ladder (the gap does not depend on eps)
    sa, sb = (SchemeConfig(**cfg[f"uniqueness.scheme_{k}"]) for k in "ab")
    gexp = PairExperiment(drift, sa, sb, x0, cfg["uniqueness.gap_T"], seed, tuple(cfg["ladders.dt"]))
    with run.timed("gap"):
        gap = pathwise_gap(gexp, paths, cfg["uniqueness.power"])
    rows = [[r["dt"], eps, r["mean"], r["stderr"], r["ci_low"], r["ci_high"]]
            for eps in cfg["ladders.eps"] for r in gap["rows"]]
    write_csv(run.path("gap_ladder.csv"), ["dt", "eps", "mean", "stderr", "ci_low", "ci_high"], rows)
    checks["gap_monotone"] = {"steps": gap["steps"], "pass": gap["monotone"]}
    checks["gap_halved"] = {"finest_over_coarsest": gap["finest_over_coarsest"], "decay_order": gap["decay_order"],
                            "pass": gap["halved"]}

    # A1 sign at ledger lambda and the lambda = 0 ablation; any T <= T1 is admissible for the traces
    T = run.T()
    if cfg["uniqueness.trace_T"] is not None:
        T = min(T, float(cfg["uniqueness.trace_T"]))
    tr, _ = _transform(run, T)
    H = _build_H(run, tr, T)
    s1, s2 = (SchemeConfig(**s) for s in cfg["uniqueness.sign_schemes"])
    traces = []
    with run.timed("sign_traces"):
        for eps in cfg["uniqueness.sign_eps"]:
            pf = _pair_function(run, tr, theta0, eps)
            exp = PairExperiment(drift, s1, s2, x0, T, seed, (cfg["uniqueness.sign_dt"],), eps=eps, lam=lam,
                                 transform=tr, x0_b=x0_b)
            traces.append(lyapunov_trace(exp, H, pf, paths, events_only=True))
    sign = sign_check_A1(traces)
    ablation = sign_check_A1(traces, lam=0.0)
    sign_report = {"ledger_lambda": sign, "ablation": ablation,
                   "ablation_has_violations": bool(ablation["violations"] > 0)}
    atomic_write_text(run.path("a1_sign.json"), dumps17(dict(sign_report, ledger=run.ledger.snapshot())) + "\n")
    checks["a1_sign"] = {"violations": sign["violations"], "events": sign["events"], "pass": sign["pass"]}
    # informational: on a convex domain with u = identity the bracket is nonpositive even at lambda = 0
    checks["a1_ablation"] = {"violations": ablation["violations"], "events": ablation["events"],
                             "has_violations": bool(ablation["violations"] > 0)}

    # decomposition residual on two rungs, invariants and the Gronwall bound
    rlam = cfg["uniqueness.residual_lambda"]
    rlam = lam if rlam is None else float(rlam)
    pf = _pair_function(run, tr, theta0, cfg["uniqueness.sign_eps"][0])
    rungs = tuple(sorted(cfg["uniqueness.residual_dt"], reverse=True))
    rexp = PairExperiment(drift, s1, s2, x0, T, seed, rungs, eps=pf.eps, lam=rlam, transform=tr)
    summaries = []
    gron = None
    with run.timed("residual_traces"):
        for dt in rungs:
            trc = lyapunov_trace(rexp, H, pf, cfg["uniqueness.residual_paths"], dt=dt)
            summaries.append(trace_summary(trc, M7))
            gron = stochastic_gronwall_bound(*gronwall_inputs(trc, M7)[:3], p=0.5, q=0.25, R=cfg["uniqueness.R"])
    residual = {"lambda": rlam, "rungs": summaries}
    atomic_write_text(run.path("lyapunov_residual.json"), dumps17(dict(residual, ledger=run.ledger.snapshot())) + "\n")
    finest = summaries[-1]
    checks["residual_finest_rung"] = {"mean": finest["residual_mean"], "stderr": finest["residual_stderr"],
                                      "pass": finest["residual_within_3se"]}
    checks["weight_in_unit_interval"] = {"pass": all(s["Z_in_unit_interval"] for s in summaries)}
    checks["gap_scaling"] = {"violations": sum(s["gap_scaling_violations"] for s in summaries),
                             "pass": all(s["gap_scaling_violations"] == 0 for s in summaries)}
    checks["stochastic_gronwall"] = gron
    return run.finish(checks, {"paths": paths, "seed": seed, "gap": gap})


def cmd_report(run: Run):
    summary = {}
    skip = {"summary.json", run.cfg["output.ledger"]}
    for p in sorted(run.out.glob("*.json")):
        if p.name in skip or p.name.endswith(".meta.json") or p.name.endswith(".bin.json"):
            continue
        try:
            data = json.loads(p.read_text())
        except ValueError:
            continue
        if not isinstance(data, dict) or "checks" not in data:
            continue
        summary[data.get("command", p.stem)] = {
            "pass": data.get("pass"),
            "checks": {k: v.get("pass") if isinstance(v, dict) else None for k, v in data["checks"].items()},
        }
    passed = all(v["pass"] for v in summary.values())
    report = {"reports": summary, "ledger": run.ledger.snapshot(), "pass": bool(passed)}
    atomic_write_text(run.path("summary.json"), dumps17(report) + "\n")
    return report


HANDLERS = {
    "pde-solve": cmd_pde_solve,
    "transform-verify": cmd_transform_verify,
    "flow": cmd_flow,
    "testfn-verify": cmd_testfn_verify,
    "simulate": cmd_simulate,
    "krylov": cmd_krylov,
    "uniqueness": cmd_uniqueness,
    "report": cmd_report,
}


def run_command(command, config, out_dir=None, threads=None, **kwargs):
    """Run one command; returns (exit code, report or None)."""
    try:
        cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
        run = Run(command, cfg, out_dir, threads)
        limiter = contextlib.nullcontext()
        if threads:
            try:
                from threadpoolctl import threadpool_limits

                limiter = threadpool_limits(int(threads))
            except ImportError:
                pass
        with limiter, np.errstate(all="ignore"):
            report = HANDLERS[command](run, **kwargs)
    except PropertyViolation as exc:
        click.echo(f"property violation: {exc}", err=True)
        return 2, None
    except (ReflectsdeError, HypothesisViolated) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1, None
    return (0 if report["pass"] else 2), report


# -- click wiring ---------------------------------------------------------------------------------


@click.group()
@click.option("--threads", type=int, default=None, help="Cap on BLAS worker threads.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help=f"Output directory (overrides the config and ${OUTPUT_ENV}).")
@click.pass_context
def main(ctx, threads, out_dir):
    """Reflected SDE experiments: transform, test functions, simulation and uniqueness checks."""
    ctx.obj = {"threads": threads, "out_dir": out_dir}


def _register(name, monte_carlo):
    config_opt = click.option("--config", "config", required=True, type=click.Path(dir_okay=False))

    if monte_carlo:
        @main.command(name)
        @config_opt
        @click.option("--paths", type=int, default=None)
        @click.option("--seed", type=int, default=None)
        @click.pass_context
        def _cmd(ctx, config, paths, seed):
            code, report = run_command(name, config, ctx.obj["out_dir"], ctx.obj["threads"], paths=paths, seed=seed)
            _finish(name, code, report)
    else:
        @main.command(name)
        @config_opt
        @click.pass_context
        def _cmd(ctx, config):
            code, report = run_command(name, config, ctx.obj["out_dir"], ctx.obj["threads"])
            _finish(name, code, report)

    _cmd.__doc__ = f"Run {name}."
    return _cmd


def _finish(name, code, report):
    if report is not None:
        for key, check in sorted(report.get("checks", report.get("reports", {})).items()):
            ok = check.get("pass") if isinstance(check, dict) else check
            click.echo(f"{name}: {key}: {'info' if ok is None else 'pass' if ok else 'FAIL'}")
        click.echo(f"{name}: {'pass' if report['pass'] else 'FAIL'}")
    sys.exit(code)


for _name in COMMANDS:
    _register(_name, _name in MONTE_CARLO)


if __name__ == "__main__":
    main()
