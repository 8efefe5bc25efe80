import json
import subprocess

import numpy as np
import pytest

from emfg.cli import DEFAULTS, load_config, main
from emfg.discretization import SpaceTimeGrid, write_field
from emfg.errors import ConfigError


def run(tmp_path, *args, config=None):
    argv = list(args) + ["--out", str(tmp_path)]
    if config is not None:
        cfg = tmp_path / "run.toml"
        cfg.write_text(config)
        argv += ["--config", str(cfg)]
    return main(argv)


def read(path):
    return json.loads(path.read_text())


# --- configuration ---------------------------------------------------------------------

def test_load_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None, ["grid.Nx=48", "model.kappa_V=0.0", "convergence.grids=[8, 16, 32]"])
    assert cfg["grid"]["Nx"] == 48 and cfg["model"]["kappa_V"] == 0.0
    assert cfg["convergence"]["grids"] == [8, 16, 32] and cfg["grid"]["Nt"] == DEFAULTS["grid"]["Nt"]
    path = tmp_path / "c.toml"
    path.write_text('[model]\nname = "congestion"\nalpha = 1.5\n[continuation]\ndtheta_init = 0.05\n')
    cfg = load_config(path, ["model.c0=0.5"])
    assert cfg["model"] == {"name": "congestion", "alpha": 1.5, "c0": 0.5}
    assert cfg["continuation"] == {"dtheta_init": 0.05}


@pytest.mark.parametrize("overrides", [["grid.bogus=1"], ["model.alpha=2.0"], ["model.name=\"nope\""],
                                       ["check.n=0"], ["check.n=2.5"], ["convergence.grids=[16, 32]"],
                                       ["continuation.speed=3"], ["noequals"], ["zzz.a=1"]])
def test_load_config_rejects(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_unreadable_config_is_a_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\nNx = ")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


# --- solve ---------------------------------------------------------------------------------

def test_solve_sql_defaults(tmp_path):
    assert run(tmp_path, "solve") == 0
    for name in ("u.txt", "m.txt", "trace.json", "certificate.json"):
        assert (tmp_path / name).is_file()
    cert = read(tmp_path / "certificate.json")
    assert cert["passed"] and all(cert["checks"].values())
    assert cert["config"]["grid"] == {"d": 1, "Nx": 32, "Nt": 32, "T": 1.0}
    trace = read(tmp_path / "trace.json")
    assert trace["status"] == "ok" and trace["trace"][-1]["theta"] == 1.0


def test_reports_are_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        out.mkdir()
        assert main(["solve", "--out", str(out), "--override", "grid.Nx=16", "--override", "grid.Nt=16"]) == 0
        assert main(["check-assumptions", "--out", str(out), "--override", "check.n=64"]) == 1
    for name in ("certificate.json", "trace.json", "assumptions.json", "u.txt", "m.txt"):
        ta, tb = (a / name).read_text(), (b / name).read_text()
        assert ta.replace(str(a), "") == tb.replace(str(b), "")


def test_solve_rejects_small_grid(tmp_path):
    assert run(tmp_path, "solve", "--override", "grid.Nx=4") == 3


def test_solve_congestion_c0_zero(tmp_path):
    code = run(tmp_path, "solve", config='[model]\nname = "congestion"\nalpha = 1.0\nc0 = 0.0\n')
    assert code == 0
    gaps = [e["min_gap"] for e in read(tmp_path / "trace.json")["trace"]]
    assert min(gaps) > 0


def test_solve_stall_exit_code(tmp_path):
    code = run(tmp_path, "solve", "--override", "continuation.newton_max_iter=1",
               "--override", "continuation.max_halvings=2", "--override", "grid.Nx=8", "--override", "grid.Nt=8")
    assert code == 4
    trace = read(tmp_path / "trace.json")
    assert trace["status"] == "stalled" and trace["stall_theta"] == trace["trace"][-1]["theta"]
    assert (tmp_path / "u_last_good.txt").is_file()


def test_bad_model_parameter_is_invariant_error(tmp_path):
    assert run(tmp_path, "solve", "--override", "model.amplitude=1.5") == 3


def test_unknown_key_exit_code(tmp_path):
    assert run(tmp_path, "solve", config="[grid]\nNy = 3\n") == 2


# --- check-assumptions ----------------------------------------------------------------------

def test_check_flat_sql_passes(tmp_path):
    assert run(tmp_path, "check-assumptions", "--override", "model.kappa_V=0.0") == 0
    assert read(tmp_path / "assumptions.json")["passed"]


def test_check_sql_with_potential_flags_HX1(tmp_path, capsys):
    assert run(tmp_path, "check-assumptions") == 1
    rep = read(tmp_path / "assumptions.json")
    assert rep["records"]["HX1"]["violations"] > 0 and "HX1" in capsys.readouterr().out


def test_check_zero_samples_is_config_error(tmp_path):
    assert run(tmp_path, "check-assumptions", "--override", "check.n=0") == 2
    assert run(tmp_path, "check-assumptions", "--override", "check.m_min=5.0", "--override", "check.m_max=1.0") == 2


# --- certify ------------------------------------------------------------------------------------

def test_certify_exact_constant_fields(tmp_path):
    g = SpaceTimeGrid(d=1, Nx=16, Nt=16)
    write_field(tmp_path / "u.txt", g, np.zeros(g.size), "u")
    write_field(tmp_path / "m.txt", g, np.ones(g.size), "m")
    code = run(tmp_path, "certify", "--override", "model.kappa_V=0.0", "--override", "model.amplitude=0.0",
               "--override", "grid.Nx=16", "--override", "grid.Nt=16")
    assert code == 0 and read(tmp_path / "certificate.json")["passed"]


def test_certify_rejects_fields_from_other_grid(tmp_path):
    g = SpaceTimeGrid(d=1, Nx=16, Nt=16)
    write_field(tmp_path / "u.txt", g, np.zeros(g.size), "u")
    write_field(tmp_path / "m.txt", g, np.ones(g.size), "m")
    assert run(tmp_path, "certify") == 3


def test_certify_missing_fields(tmp_path):
    assert run(tmp_path, "certify") == 3


def test_certify_after_solve_uses_stored_fields(tmp_path):
    assert run(tmp_path, "solve", "--override", "grid.Nx=16", "--override", "grid.Nt=16") == 0
    first = (tmp_path / "certificate.json").read_text()
    assert run(tmp_path, "certify", "--override", "grid.Nx=16", "--override", "grid.Nt=16") == 0
    assert (tmp_path / "certificate.json").read_text() == first


# --- convergence -----------------------------------------------------------------------------

def test_convergence_exit_code_follows_window(tmp_path):
    ok = run(tmp_path, "convergence")
    rep = read(tmp_path / "convergence.json")
    assert ok == 0 and rep["within_window"] and 1.7 <= rep["order_u"] <= 2.3
    assert run(tmp_path, "convergence", "--override", "convergence.order_min=1.9") == 1
    assert not read(tmp_path / "convergence.json")["within_window"]


def test_entry_point_runs(tmp_path):
    proc = subprocess.run(["emfg", "solve", "--out", str(tmp_path), "--override", "grid.Nx=4"],
                          capture_output=True, text=True)
    assert proc.returncode == 3 and "Nx" in proc.stderr
