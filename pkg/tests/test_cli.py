import json

import pytest
from click.testing import CliRunner

from reflsde.cli import load_config, main, parse_config, run_command
from reflsde.errors import ConfigError

BASE = """
[domain]
kind = "interval"
params = [0.0, 1.0]

[drift]
preset = "{preset}"
bound = 2.0

[resolution]
h = 0.015625
dt = 0.0078125

[horizon]
T = 0.0625

[transform]
samples = 500
{extra}
"""


def write(tmp_path, preset="zero", extra="", name="c.toml"):
    p = tmp_path / name
    p.write_text(BASE.format(preset=preset, extra=extra))
    return p


def test_unknown_key_names_key_and_line():
    text = '[domain]\nkind = "disk"\nparams = [1.0]\n\n[drift]\npresett = "zero"\n'
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == "drift.presett"
    assert err.value.line == 6


def test_bad_value_is_located():
    text = '[domain]\nkind = "disk"\nparams = [1.0]\n[resolution]\nh = -1.0\n'
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == "resolution.h" and err.value.line == 5


def test_unknown_preset():
    with pytest.raises(ConfigError):
        parse_config('[domain]\nkind = "disk"\nparams = [1.0]\n[drift]\npreset = "wiggle"\n')


def test_start_outside_domain_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config('[domain]\nkind = "disk"\nparams = [1.0]\n[simulate]\nx0 = [2.0, 0.0]\n')
    assert err.value.key == "simulate.x0"


def test_missing_seed_for_monte_carlo(tmp_path):
    cfg = write(tmp_path)
    res = CliRunner().invoke(main, ["--out", str(tmp_path / "o"), "uniqueness", "--config", str(cfg)])
    assert res.exit_code == 1
    assert "seeds.seed" in res.output


def test_pde_solve_zero_drift_passes(tmp_path):
    cfg = write(tmp_path)
    res = CliRunner().invoke(main, ["--out", str(tmp_path / "o"), "pde-solve", "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    rep = json.loads((tmp_path / "o" / "pde-solve.json").read_text())
    assert rep["pass"] and (tmp_path / "o" / "u_field.bin").exists()


def test_narrow_determinant_band_fails(tmp_path):
    cfg = write(tmp_path, "sign1d", 'det_band = [0.9, 1.1]')
    code, rep = run_command("transform-verify", cfg, out_dir=tmp_path / "o")
    assert code == 2
    assert not rep["checks"]["determinant_band"]["pass"]


def test_env_overrides_config_dir(tmp_path, monkeypatch):
    cfg = write(tmp_path)
    monkeypatch.setenv("REFLSDE_OUTPUT_DIR", str(tmp_path / "env"))
    code, _ = run_command("pde-solve", cfg)
    assert code == 0
    assert (tmp_path / "env" / "pde-solve.json").exists()
    assert not (tmp_path / "out").exists()


def test_reports_are_byte_identical(tmp_path):
    cfg = write(tmp_path, "sign1d")
    for d in ("a", "b"):
        for cmd in ("transform-verify", "pde-solve"):
            run_command(cmd, cfg, out_dir=tmp_path / d)
    for name in ("transform-verify.json", "pde-solve.json", "u_field.bin", "ledger.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_config_roundtrip(tmp_path):
    cfg = load_config(write(tmp_path))
    assert cfg["drift.preset"] == "zero"
    assert cfg["testfn.delta5"] == 0.1
    assert cfg.canonical() == load_config(write(tmp_path, name="d.toml")).canonical()
