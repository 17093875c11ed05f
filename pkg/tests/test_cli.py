import csv
import json
import os

import numpy as np
import pytest

from pflow.cli import main
from pflow.errors import ValidationError
from pflow.scenarios import CATALOG, list_scenarios, resolve_config, run_scenario

SMALL_EOS = {"widths": [2, 8, 1], "n_examples": 5, "seeds": [0], "workers": 1}
SMALL = {
    "quad2d": {"n_steps": 4},
    "scalar1d": {"n_steps": 3},
    "zsquare": {},
    "banana": {"n_steps": 3, "hs": [0.005]},
    "cosbranch": {"n_steps": 2, "hs": [0.5]},
    "mlp_error": {"seeds": [0], "hs": [0.1], "n_steps": 2, "step": 1e-3},
    "eos_mlp": {**SMALL_EOS, "n_steps": 6, "probe_every": 3, "probe_step": 1e-3},
    "flip_u0": {**SMALL_EOS, "h_scale": 1.0, "max_steps": 5, "step": 1e-3},
    "lr_drop": {**SMALL_EOS, "n_steps": 6, "drop_at": 3},
    "dotprod_pred": {**SMALL_EOS, "n_steps": 4},
    "drift_corr": {"n_thetas": 2, "hs": [0.01, 0.02], "include_rosenbrock": False},
    "dal_sweep": {"n_steps": 5, "ps": [1.0], "fixed_hs": [0.1], "sigmas": [10.0]},
    "escape_sharp": {"n_after": 5, "seeds": [], "max_steps": 500},
}


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_catalog_size_and_figures():
    assert len(CATALOG) >= 12
    text = list_scenarios()
    for sid, sc in CATALOG.items():
        assert sid in text and sc.figure and f"figure: {sc.figure}" in text
    assert len({sc.figure for sc in CATALOG.values()}) == len(CATALOG)


@pytest.mark.parametrize("sid", sorted(SMALL))
def test_every_scenario_runs(sid, tmp_path):
    summary = run_scenario(sid, SMALL[sid], out=str(tmp_path))
    assert summary["scenario"] == sid
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["scenario"] == sid and all(cfg[k] == v for k, v in SMALL[sid].items())
    assert json.loads((tmp_path / "summary.json").read_text())["scenario"] == sid
    data = [f for f in os.listdir(tmp_path) if f not in ("config.json", "summary.json")]
    assert data


def test_catalog_covered_by_smoke_configs():
    assert set(SMALL) == set(CATALOG)


def test_zsquare_divergence_panel(tmp_path):
    run_scenario("zsquare", {"h": 2.1}, out=str(tmp_path))
    rows = read_csv(tmp_path / "zsquare_h2.1.csv")
    gd = np.array([float(r["gd"]) for r in rows if r["gd"] != "nan"])
    pf = np.array([float(r["pf_re"]) for r in rows])[::20]
    assert np.all(np.diff(np.abs(gd)) > 0)
    assert np.all(np.sign(gd[1:]) == -np.sign(gd[:-1]))
    np.testing.assert_allclose(pf, gd, atol=1e-12)


def test_quad2d_h09(tmp_path):
    s = run_scenario("quad2d", {"h": 0.9}, out=str(tmp_path))
    pf = [r for r in s["runs"] if r["flow"] == "pf"][0]
    assert pf["max_err_vs_gd"] <= 1e-3
    header = (tmp_path / "quad2d_pf_h0.9.csv").read_text().splitlines()[0]
    assert header.startswith("t,theta_0_re,theta_0_im,theta_1_re,theta_1_im,loss_re")


def test_drift_corr_spearman(tmp_path):
    s = run_scenario("drift_corr", {}, out=str(tmp_path))
    assert s["spearman_quadratic"] >= 0.95


def test_determinism_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        run_scenario("quad2d", {"n_steps": 3, "seed": 5}, out=str(d))
    for name in sorted(os.listdir(a)):
        if name != "config.json":
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_config_validation():
    with pytest.raises(ValidationError, match="bogus"):
        resolve_config("quad2d", {"bogus": 1})
    with pytest.raises(ValidationError, match="n_steps"):
        resolve_config("quad2d", {"n_steps": "many"})
    with pytest.raises(ValidationError, match="available"):
        resolve_config("nope", {})
    with pytest.raises(ValidationError):
        resolve_config("quad2d", {"format": "xml"})
    assert resolve_config("quad2d", {"h": 0.5})["hs"] == [0.5]


def test_cli_simulate_example(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--flow", "pf", "--model", "scalar_square", "--h", "1.5", "--steps", "6", "--out", str(out)]) == 0
    rows = read_csv(out / "trajectory.csv")
    assert len(rows) == 7
    assert float(rows[-1]["t"]) == pytest.approx(9.0)
    assert float(rows[-1]["theta_0_re"]) == pytest.approx(0.5**6, abs=1e-3)
    assert json.loads((out / "config.json").read_text())["flow"] == "pf"
    assert json.loads((out / "trajectory.json").read_text())["spec"]["h"] == 1.5


def test_cli_diagnose_example(tmp_path, capsys):
    out = tmp_path / "diag"
    assert main(["diagnose", "--model", "mlp", "--seed", "0", "--h", "0.1", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["directions"]) == 5 and rep["k"] == 5
    for d in rep["directions"]:
        assert d["regime"] in ("RealStable", "ComplexStable", "UnstableComplex", "Collapse")
    assert rep["threshold_2_over_h"] == pytest.approx(20)
    assert json.loads(capsys.readouterr().out)["lambda0"] == rep["lambda0"]
    assert (out / "report.csv").exists()


def test_cli_json_format(tmp_path):
    out = tmp_path / "o"
    assert main(["optimize", "--model", "rosenbrock", "--method", "dal", "--steps", "3", "--format", "json", "--no-drift", "--out", str(out)]) == 0
    data = json.loads((out / "trajectory.json").read_text())
    assert len(data["records"]) == 4 and "lr" in data["records"][1]


def test_cli_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "rosenbrock", "method": "gd", "h": 0.001, "steps": 4, "no-drift": True}))
    out = tmp_path / "o"
    assert main(["optimize", "--config", str(cfg), "--steps", "2", "--out", str(out)]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["steps"] == 2 and echoed["h"] == 0.001 and echoed["model"] == "rosenbrock"
    assert len(read_csv(out / "trajectory.csv")) == 3


def test_cli_run_and_list(tmp_path, capsys):
    assert main(["list"]) == 0
    assert "escape_sharp" in capsys.readouterr().out
    out = tmp_path / "z"
    assert main(["run", "zsquare", "--set", "hs=[0.8]", "--set", "n_steps=3", "--seed", "2", "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 2


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "nope"]) == 1
    assert main(["simulate", "--h", "-1", "--out", str(tmp_path / "a")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"modle": "x"}')
    assert main(["optimize", "--config", str(bad)]) == 1
    # GD past 2/lambda diverges
    assert main(["optimize", "--model", "quadratic", "--h", "3", "--steps", "200", "--no-drift", "--out", str(tmp_path / "d")]) == 2
    # Collapse direction on a non-quadratic model
    assert main(["simulate", "--model", "quartic", "--theta0", "1", "--flow", "pf", "--h", "0.3333333333333333", "--steps", "1", "--out", str(tmp_path / "s")]) == 2
