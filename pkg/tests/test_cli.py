import json
import subprocess
import sys

import numpy as np
import pytest

from lodnls.cli import main, build_config, _load_ini


def test_no_arguments_exits_with_usage():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_converge_tiny(tmp_path, capsys):
    rc = main(["converge", "--example", "1", "--H", "2,4", "--h", "16",
               "--tau", "0.1", "--T", "0.5", "--out", str(tmp_path),
               "--no-cache"])
    assert rc == 0
    assert (tmp_path / "report.csv").exists()
    out = capsys.readouterr().out
    assert "H=1/2" in out and "H=1/4" in out


def test_run_tiny(tmp_path, capsys):
    rc = main(["run", "--example", "1", "--H", "2", "--h", "8", "--tau", "0.1",
               "--T", "0.3", "--out", str(tmp_path), "--no-cache"])
    assert rc == 0
    assert (tmp_path / "energy.csv").exists()
    assert "energy drift" in capsys.readouterr().out


def test_energy_tiny(tmp_path, capsys):
    rc = main(["energy", "--example", "1", "--H", "2", "--h", "8",
               "--tau", "0.1", "--T", "0.2", "--ell", "1,2",
               "--out", str(tmp_path), "--no-cache"])
    assert rc == 0
    assert (tmp_path / "energy_l1.csv").exists()
    assert "rel drift" in capsys.readouterr().out


def test_decay_tiny(tmp_path):
    rc = main(["decay", "--example", "1", "--H", "4", "--h", "16",
               "--out", str(tmp_path), "--no-cache"])
    assert rc == 0
    assert (tmp_path / "decay.csv").exists()


def test_error_reports_json(tmp_path, capsys):
    rc = main(["converge", "--example", "42", "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    payload = json.loads(err)
    assert payload["error"] == "ValueError"
    assert "42" in payload["message"]


def test_ini_config_with_flag_override(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("""
[problem]
example = 1
seed = 7
T = 0.5

[discretization]
H = 2 4
h = 16
tau = 0.1
ell = default
compare = reference
reference_h = 16
reference_tau = 0.05

[solver]
tol = 1e-10
threads = 2

[output]
dir = {out}
no_cache = true
""".format(out=tmp_path / "o"))
    values = _load_ini(str(ini))
    assert values["example"] == 1
    assert values["H_list"] == [2, 4]
    assert values["no_cache"] is True
    assert values["compare"] == "reference"
    assert values["reference_h"] == 16
    assert values["reference_tau"] == 0.05

    class Args:
        config = str(ini)
        example = None
        H = None
        h = None
        tau = 0.05  # flag wins over the file
        tau_rule = None
        T = None
        compare = None
        reference_h = None
        reference_tau = None
        ell = None
        seed = None
        center_domain = None
        threads = None
        tol = None
        max_iters = None
        no_cache = None
        cache_dir = None
        out = None

    cfg = build_config(Args())
    assert cfg.tau == 0.05
    assert cfg.seed == 7
    assert cfg.H_list == [2, 4]
    assert cfg.tol == 1e-10


def test_converge_against_reference_surrogate(tmp_path, capsys):
    # forcing the surrogate comparator on a problem with a closed form
    rc = main(["converge", "--example", "1", "--H", "2,4", "--h", "16",
               "--tau", "0.1", "--T", "0.3", "--ell", "1,2",
               "--compare", "reference", "--ref-h", "16", "--ref-tau", "0.1",
               "--out", str(tmp_path), "--no-cache"])
    assert rc == 0
    assert "H=1/4" in capsys.readouterr().out
    text = (tmp_path / "report.csv").read_text()
    assert "FAILED" not in text
    layers = [line.split(",")[2] for line in text.splitlines()[1:]]
    assert layers == ["1", "2"]  # per-row list zipped against H


def test_compare_exact_requires_closed_form(tmp_path, capsys):
    rc = main(["converge", "--example", "2", "--H", "2", "--h", "8",
               "--tau", "0.1", "--T", "0.2", "--compare", "exact",
               "--out", str(tmp_path), "--no-cache"])
    assert rc == 1
    payload = json.loads(capsys.readouterr().err)
    assert payload["error"] == "ValueError"


def test_missing_config_file():
    rc = main(["converge", "--config", "/nonexistent/cfg.ini"])
    assert rc == 1


def test_cache_subcommand(tmp_path, capsys):
    rc = main(["cache", "--cache-dir", str(tmp_path / "c")])
    assert rc == 0
    assert "entries: 0" in capsys.readouterr().out


def test_console_script_entry_point(tmp_path):
    # the installed executable wires to the same main
    r = subprocess.run(["lodnls", "converge", "--example", "1", "--H", "2",
                        "--h", "8", "--tau", "0.1", "--T", "0.2",
                        "--out", str(tmp_path), "--no-cache"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert (tmp_path / "manifest.json").exists()
