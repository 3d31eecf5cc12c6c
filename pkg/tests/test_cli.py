import csv
import json

import numpy as np
import pytest

from pmvlab.cli import (
    ConfigError,
    expression_function,
    ladder_ok,
    load_config,
    main,
    resolve_config,
)

BASE = """
seed = 4
quality = "low"

[problem]
p = 3.0
d = 1
lower = [-1.0]
upper = [1.0]
f = "1"
g = "0"
"""


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(BASE + text)
    return str(path)


def test_resolve_config_defaults_and_errors():
    cfg = resolve_config({"problem": {"p": 4}}, ("problem", "solve"))
    assert cfg["problem"]["p"] == 4.0 and isinstance(cfg["problem"]["p"], float)
    assert cfg["solve"]["epsilon"] == 0.1 and cfg["seed"] == 0
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_config({"problem": {"q": 1}})
    with pytest.raises(ConfigError, match="unknown table"):
        resolve_config({"solver": {}})
    with pytest.raises(ConfigError, match=r"\[problem\].d"):
        resolve_config({"problem": {"d": 1.5}})
    with pytest.raises(ConfigError, match="required"):
        resolve_config({}, ("convergence",))
    with pytest.raises(ConfigError, match="quality"):
        resolve_config({"quality": "ultra"})


def test_expression_function():
    f = expression_function("x0 * x1 + r ** 2 + cos(pi * x0)", 2)
    pts = np.array([[1.0, 2.0], [0.5, 0.0]])
    np.testing.assert_allclose(f(pts), [2.0 + 5.0 - 1.0, 0.25 + np.cos(np.pi / 2)])
    assert expression_function("3", 1)(np.zeros((4, 1))).shape == (4,)
    for bad in ("__import__('os')", "x5", "open('x')", "x0."):
        with pytest.raises(ConfigError):
            expression_function(bad, 2)(pts)


def test_ladder_ok():
    assert ladder_ok([0.3, 0.2, 0.21], 0.1)
    assert not ladder_ok([0.3, 0.2, 0.25], 0.1)


def test_load_config_errors(tmp_path):
    assert load_config(None) == {}
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1}))
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_identities_command(tmp_path, capsys):
    cfg = write(tmp_path, "[identities]\ncases = 200\ngrid = 10000\n")
    assert main(["identities", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader((tmp_path / "o" / "identities.csv").open()))
    assert len(rows) == 201
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["experiment"] == "identities" and "identities.csv" in manifest["artifacts"]
    assert "violations 0" in capsys.readouterr().out


def test_solve_then_game_from_file(tmp_path):
    cfg = write(tmp_path, """
[solve]
epsilon = 0.2
[game]
epsilon = 0.2
rollouts = 60
sandwich_rollouts = 20
transcripts = 5
value_slack = 0.2
solution = "%s"
""" % (tmp_path / "s" / "solution.csv"))
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    rec = json.loads((tmp_path / "s" / "solve.json").read_text())
    assert rec["final_residual"] <= 1e-8
    code = main(["game", "--config", cfg, "--out", str(tmp_path / "g"), "--workers", "2"])
    summary = json.loads((tmp_path / "g" / "summary.json").read_text())
    assert set(summary["checks"]) == {"value", "cap_fraction", "sandwich"}
    assert code == (0 if all(summary["checks"].values()) else 1)
    assert len((tmp_path / "g" / "transcripts.jsonl").read_text().splitlines()) == 6


def test_game_missing_solution_is_config_error(tmp_path, capsys):
    cfg = write(tmp_path, '[game]\nepsilon = 0.2\nsolution = "nowhere.csv"\n')
    assert main(["game", "--config", cfg, "--out", str(tmp_path / "g")]) == 2
    assert "pmvlab solve" in capsys.readouterr().err


def test_convergence_and_manifest_rerun(tmp_path):
    cfg = write(tmp_path, "[convergence]\nepsilons = [0.3, 0.2]\nslack = 10.0\n")
    out1, out2 = tmp_path / "c1", tmp_path / "c2"
    assert main(["convergence", "--config", cfg, "--out", str(out1)]) == 0
    rows = list(csv.DictReader((out1 / "convergence.csv").open()))
    assert [float(r["epsilon"]) for r in rows] == [0.3, 0.2]
    # a manifest reproduces the run byte for byte
    assert main(["convergence", "--config", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
    for name in ("convergence.csv", "solution_eps0.3.csv", "solution_eps0.2.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_convergence_final_max_failure(tmp_path):
    cfg = write(tmp_path, "[convergence]\nepsilons = [0.3]\nfinal_max = 1e-6\n")
    assert main(["convergence", "--config", cfg, "--out", str(tmp_path / "c")]) == 1


def test_expand_command(tmp_path):
    cfg = write(tmp_path, """
[expand]
field = "radial"
x = [0.5]
operators = ["A", "M"]
epsilons = [0.1, 0.05, 0.025]
reference_quality = "default"
""")
    assert main(["expand", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "expansion_A_radial.csv").exists()
    crit = write(tmp_path, '[expand]\nfield = "critical"\noperators = ["A"]\n', "crit.toml")
    assert main(["expand", "--config", crit, "--out", str(tmp_path / "e2")]) == 2


def test_bad_configs_exit_2(tmp_path):
    cfg = write(tmp_path, "[solve]\nepsilon = 1.5\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    cfg = write(tmp_path, "[solve]\nepsilon = 0.2\nmax_iter = 2\n", "slow.toml")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "y")]) == 3
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_out_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PMVLAB_OUT", str(tmp_path / "env"))
    cfg = write(tmp_path, "[identities]\ncases = 10\ngrid = 100\nrel_tol = 0.01\n")
    assert main(["identities", "--config", cfg]) == 0
    assert (tmp_path / "env" / "identities.csv").exists()
