"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The heavy criteria drive the command-line pipeline through ``run_command``
so the shared ledger flows between stages exactly as it does for a user.
Planar transforms use h = 2^-5 with 64 angular nodes; the default grid is
used where a criterion names it.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from reflsde.cli import run_command
from reflsde.fields import DRIFT_PRESETS, make_drift
from reflsde.geometry import disk
from reflsde.uniqueness import PairExperiment, SchemeConfig, pathwise_gap
from reflsde.zvonkin import solve_kappa, solve_theta1, theta1_margins

pytestmark = pytest.mark.acceptance

DISK = """
[domain]
kind = "disk"
params = [1.0]

[drift]
preset = "{preset}"
bound = 2.0
vector = [0.7, -0.3]

[resolution]
h = 0.03125
n_angle = 64

[horizon]
T = "auto"
candidates = [1.0, 0.25, 0.0625, 0.015625, 0.00390625]

[seeds]
seed = 11

[transform]
samples = {samples}

[flow]
points = 100

[testfn]
g_samples = {g_samples}
pair_samples = {samples}
boundary_samples = {samples}
held_out = {held_out}

[simulate]
x0 = [0.3, 0.2]
paths = {paths}

[krylov]
paths = {paths}

[uniqueness]
x0 = [0.0, 0.9]
x0_b = [0.6, 0.7]
gap_T = 0.25
paths = {pairs}
sign_dt = 0.00390625
residual_paths = {residual_paths}
trace_T = 0.0625
"""

FULL = dict(samples=10_000, g_samples=100_000, held_out=1000, paths=10_000, pairs=1000, residual_paths=200)
SMALL = dict(samples=2000, g_samples=10_000, held_out=500, paths=1000, pairs=100, residual_paths=50)


def record(n, ok, detail, elapsed=None):
    t = "" if elapsed is None else f" [{elapsed:.0f} s]"
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}{t}"
    print(ACCEPTANCE_LINES[n])


def write_disk(tmp, preset, scale=FULL):
    p = tmp / f"disk_{preset}.toml"
    p.write_text(DISK.format(preset=preset, **scale))
    return p


class Pipeline:
    """Runs commands once per (preset, command) into one output directory per preset."""

    def __init__(self, root):
        self.root = root
        self.reports = {}
        self.times = {}

    def run(self, preset, command, **kw):
        key = (preset, command)
        if key not in self.reports:
            cfg = write_disk(self.root, preset)
            t = time.perf_counter()
            code, rep = run_command(command, cfg, out_dir=self.root / f"out_{preset}", **kw)
            self.times[key] = time.perf_counter() - t
            assert code in (0, 2), f"{command} on {preset} errored"
            self.reports[key] = (code, rep)
        return self.reports[key]


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    return Pipeline(tmp_path_factory.mktemp("acceptance"))


def test_c01_pde_exactness(tmp_path):
    lines, ok = [], True
    for kind, params, vec in (("interval", "[0.0, 1.0]", "[0.7]"), ("disk", "[1.0]", "[0.7, -0.3]")):
        for preset in ("zero", "constant"):
            cfg = tmp_path / f"{kind}_{preset}.toml"
            cfg.write_text(f'[domain]\nkind = "{kind}"\nparams = {params}\n[drift]\npreset = "{preset}"\n'
                           f'vector = {vec}\n[horizon]\nT = 1.0\n')
            t = time.perf_counter()
            code, rep = run_command("pde-solve", cfg, out_dir=tmp_path / f"o_{kind}_{preset}")
            el = time.perf_counter() - t
            err = rep["checks"]["exact_solution"]
            good = code == 0 and err["pass"] and el < 60
            ok &= good
            lines.append(f"{kind}/{preset} {err['max_error']:.1e} {el:.0f}s")
    record(1, ok, "; ".join(lines))
    assert ok


def test_c02_transform_bounds(pipe):
    code, rep = pipe.run("sign1d", "transform-verify")
    det, lip = rep["checks"]["determinant_band"], rep["checks"]["bilipschitz"]
    el = pipe.times[("sign1d", "transform-verify")]
    ok = det["pass"] and lip["pass"] and el < 300
    record(2, ok, f"T1={rep['T1']:g} det in [{det['det_min']:.3f}, {det['det_max']:.3f}] "
                  f"M1={lip['M1']:.3f} M2/M1={lip['ratio']:.3f}", el)
    assert ok


def test_c03_cone_conditions(pipe):
    parts, ok, total = [], True, 0.0
    for preset in ("zero", "constant", "sign1d"):
        _, rep = pipe.run(preset, "transform-verify")
        cone = rep["checks"]["cone_conditions"]
        total += pipe.times[(preset, "transform-verify")]
        ok &= cone["violations"] == 0 and cone["triples"] >= 10_000
        parts.append(f"{preset}: {cone['violations']}/{cone['triples']}")
    ok &= total < 300
    record(3, ok, "violations " + ", ".join(parts), total)
    assert ok


def test_c04_angle_feasibility():
    t = time.perf_counter()
    parts, ok = [], True
    for theta0 in (np.pi / 6, np.pi / 4, np.pi / 3):
        th1 = solve_theta1(theta0)
        m = theta1_margins(th1, theta0, solve_kappa(th1, theta0))
        ok &= th1 > 0 and min(m) > 0
        parts.append(f"theta1={th1:.5f} min margin {min(m):.1e}")
    el = time.perf_counter() - t
    ok &= el < 1.0
    record(4, ok, "; ".join(parts), el)
    assert ok


def test_c05_flow_and_hitting(pipe):
    pipe.run("sign1d", "transform-verify")
    code, rep = pipe.run("sign1d", "flow")
    c = rep["checks"]
    el = pipe.times[("sign1d", "flow")]
    ok = code == 0 and el < 300
    record(5, ok, f"psi {c['psi_jacobian']['rel_error']:.1e} defect {c['hitting_defect']['max']:.1e} "
                  f"grad {c['hitting_gradient']['rel_error']:.1e} "
                  f"transversality {c['transversality']['min']:.7f} >= {c['transversality']['cos_theta1']:.7f}", el)
    assert ok


def test_c06_test_functions(pipe):
    pipe.run("sign1d", "transform-verify")
    code, rep = pipe.run("sign1d", "testfn-verify")
    c = rep["checks"]
    el = pipe.times[("sign1d", "testfn-verify")]
    failed = [k for k, v in c.items() if not v.get("pass", True)]
    ok = code == 0 and el < 600
    record(6, ok, f"M6={rep['ledger']['M6']['value']:.3g} M7={rep['ledger']['M7']['value']:.3g} "
                  f"H margin {c['boundary_function']['min_margin']:.3f} failed={failed}", el)
    assert ok


def test_c07_ito_residual(pipe):
    parts, ok, total = [], True, 0.0
    for preset in ("zero", "sign1d"):
        code, rep = pipe.run(preset, "simulate")
        total += pipe.times[(preset, "simulate")]
        for name in ("ito_residual_x0", "ito_residual_square_norm"):
            r = rep["checks"][name]
            ok &= r["pass"]
            parts.append(f"{preset}/{name[13:]} {r['mean']:+.1e}+-{r['stderr']:.1e}")
    ok &= total < 600
    record(7, ok, "; ".join(parts), total)
    assert ok


def test_c08_krylov(pipe):
    code, rep = pipe.run("sign1d", "krylov")
    k = rep["checks"]["krylov_family"]
    el = pipe.times[("sign1d", "krylov")]
    m8 = k["M8"]
    ok = k["pass"] and all(np.isfinite(v) for v in m8.values()) and el < 600
    record(8, ok, f"M8 {', '.join(f'{w}:{v:.3f}' for w, v in m8.items())} spread {k['spread']:.3f}", el)
    assert ok


def test_c09_uniqueness_harness(pipe):
    total = 0.0
    sign_ok, ablation_events = True, 0
    for preset in ("zero", "sign1d"):
        pipe.run(preset, "transform-verify")
        pipe.run(preset, "testfn-verify")
        _, rep = pipe.run(preset, "uniqueness")
        total += sum(pipe.times[(preset, c)] for c in ("uniqueness",))
        sign_ok &= rep["checks"]["a1_sign"]["pass"]
        ablation_events += rep["checks"]["a1_ablation"]["violations"]
    t = time.perf_counter()
    dom = disk(1.0)
    ladder = tuple(2.0**-k for k in range(6, 11))
    monotone, halved, ratios = True, True, []
    for preset in DRIFT_PRESETS:
        drift = make_drift(dom, preset, bound=2.0, vector=[0.7, -0.3])
        exp = PairExperiment(drift, SchemeConfig(), SchemeConfig("projection", 2), [0.0, 0.5], 1.0, 11, ladder)
        g = pathwise_gap(exp, 1000)
        monotone &= g["monotone"]
        halved &= g["halved"]
        ratios.append(f"{preset}:{g['finest_over_coarsest']:.2f}")
    total += time.perf_counter() - t
    ok = sign_ok and ablation_events > 0 and monotone and halved and total < 1800
    record(9, ok, f"A1 sign {'ok' if sign_ok else 'violated'}; ablation violations {ablation_events}; "
                  f"gap monotone {monotone}; finest/coarsest {' '.join(ratios)} (need <= 0.5)", total)
    assert sign_ok and ablation_events > 0 and monotone
    assert halved


def test_c10_determinism(tmp_path):
    cfg = write_disk(tmp_path, "zero", SMALL)
    commands = ("transform-verify", "pde-solve", "flow", "testfn-verify", "simulate", "krylov", "uniqueness",
                "report")
    t = time.perf_counter()
    for d in ("a", "b"):
        for cmd in commands:
            code, _ = run_command(cmd, cfg, out_dir=tmp_path / d)
            assert code in (0, 2)
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.endswith(".meta.json"))
    diff = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    record(10, not diff, f"{len(files)} files compared, differing: {diff}", time.perf_counter() - t)
    assert not diff
