import json

import pytest

from spdelab.cli import main
from spdelab.config import ConfigError, RunConfig, component_seed, load_config, parse_config
from spdelab.pipeline import RunManifest, default_workers

SMALL = """
seed = 3

[grid]
n_cells = 64

[spde]
T = 0.05
dt = 0.001
n_levels = 256

[particles]
n_init = 100
T = 0.02
replicas = 3
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def read_manifest(out):
    return json.loads((out / "run_manifest.json").read_text())


# -- configuration -------------------------------------------------------------------


def test_defaults_and_hash_stability():
    cfg = load_config(None)
    assert cfg == RunConfig()
    a = parse_config('{"seed": 1, "grid": {"n_cells": 64, "x_min": -4.0}}', "json")
    b = parse_config('{"grid": {"x_min": -4.0, "n_cells": 64}, "seed": 1}', "json")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.with_seed(2).config_hash()
    assert a.with_seed(None) is a


def test_unknown_key_reports_line():
    text = "seed = 1\n[spde]\ndt = 0.001\nstep_size = 0.1\n"
    with pytest.raises(ConfigError, match=r"line 4: spde.step_size"):
        parse_config(text, "toml")


def test_wrong_type_and_range():
    with pytest.raises(ConfigError, match="line 2: grid.n_cells"):
        parse_config('[grid]\nn_cells = "256"\n', "toml")
    with pytest.raises(ConfigError, match="x_max"):
        parse_config("[grid]\nx_min = 2.0\nx_max = 1.0\n", "toml")
    with pytest.raises(ConfigError, match="JSON syntax"):
        parse_config('{"seed": 1,,}', "json")
    with pytest.raises(ConfigError, match="TOML"):
        parse_config("seed = = 1", "toml")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.toml")


def test_component_seeds():
    assert component_seed(0, "spde") == component_seed(0, "spde")
    assert component_seed(0, "spde") != component_seed(0, "particles")
    assert component_seed(0, "spde") != component_seed(1, "spde")


def test_default_workers(monkeypatch):
    monkeypatch.setenv("SPDE_LAB_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("SPDE_LAB_WORKERS", "many")
    assert default_workers() == 1


# -- commands ------------------------------------------------------------------------


def test_verify_yw(tmp_path, capsys):
    out = tmp_path / "yw"
    assert main(["verify", "yw", "--k", "10", "--out", str(out)]) == 0
    rep = json.loads((out / "yw_report.json").read_text())
    assert rep["passed"] and len(rep["rows"]) == 10
    assert all(r["phi2_ok"] and r["gap_ok"] for r in rep["rows"])
    assert "status: pass" in capsys.readouterr().out
    assert main(["verify", "yw", "--k", "0", "--out", str(out)]) == 1


def test_solve_heat_only(tmp_path, small):
    out = tmp_path / "heat"
    assert main(["solve", "--kernel", "none", "--config", str(small), "--out", str(out)]) == 0
    rep = json.loads((out / "solve_report.json").read_text())
    assert rep["heat_gap"] <= 1e-3
    man = read_manifest(out)
    assert man["status"] == "pass"
    assert RunManifest(**man).missing_files(out) == []
    assert any(f["path"] == "final_states.csv" for f in man["files"])


def test_solve_coarse_heat_fails(tmp_path):
    cfg = tmp_path / "coarse.toml"
    cfg.write_text("[grid]\nn_cells = 64\n[spde]\ndt = 0.125\nT = 0.25\n")
    assert main(["solve", "--kernel", "none", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert read_manifest(tmp_path / "o")["status"] == "fail"


def test_rerun_byte_identical(tmp_path, small):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["solve", "--kernel", "sbm", "--config", str(small), "--out", str(out)]) == 0
    ma, mb = (read_manifest(o) for o in outs)
    assert ma["config_hash"] == mb["config_hash"]
    csv_a = {f["path"]: f["sha256"] for f in ma["files"] if f["path"].endswith(".csv")}
    csv_b = {f["path"]: f["sha256"] for f in mb["files"] if f["path"].endswith(".csv")}
    assert csv_a and csv_a == csv_b
    for name in csv_a:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_override(tmp_path, small):
    main(["solve", "--config", str(small), "--out", str(tmp_path / "a"), "--seed", "8"])
    main(["solve", "--config", str(small), "--out", str(tmp_path / "b")])
    a, b = read_manifest(tmp_path / "a"), read_manifest(tmp_path / "b")
    assert a["seeds"]["root"] == 8 and b["seeds"]["root"] == 3
    assert a["seeds"]["spde"] == component_seed(8, "spde")
    assert (tmp_path / "a" / "final_states.csv").read_bytes() != (tmp_path / "b" / "final_states.csv").read_bytes()


def test_particles_command(tmp_path, small):
    for model in ("sbm", "fv"):
        out = tmp_path / model
        assert main(["particles", model, "--config", str(small), "--out", str(out)]) == 0
        assert (out / "total_mass.csv").exists()
        assert len(list((out / "final").glob("replica_*.csv"))) == 3
        assert read_manifest(out)["status"] == "done"
    again = tmp_path / "again"
    main(["particles", "fv", "--config", str(small), "--out", str(again)])
    assert (again / "total_mass.csv").read_bytes() == (tmp_path / "fv" / "total_mass.csv").read_bytes()


def test_bdsde_solve_command(tmp_path):
    out = tmp_path / "bd"
    assert main(["bdsde", "solve", "--out", str(out)]) == 0
    assert (out / "bdsde_means.csv").exists()
    assert json.loads((out / "bdsde_report.json").read_text())["y_rms_error"] <= 0.02


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("seed = 1\n[particles]\nn_init = 10\nn_int = 5\n")
    assert main(["particles", "sbm", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "line 4" in err and "particles.n_int" in err


def test_compare_under_replicated(tmp_path, capsys):
    cfg = tmp_path / "few.toml"
    cfg.write_text("[compare]\nparticle_replicas = 50\n")
    assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "at least 100 replicas" in capsys.readouterr().err


def test_probe_parsing(tmp_path):
    with pytest.raises(SystemExit):
        main(["verify", "law", "--probes", "a,b", "--out", str(tmp_path)])
