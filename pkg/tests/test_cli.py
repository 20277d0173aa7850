import numpy as np
import pytest

from halfspace_penrose.cli_report import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VERIFY,
    ConfigError,
    config_hash,
    load_config,
    main,
)


def _ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _summary(out):
    pairs = (line.split(": ", 1) for line in (out / "summary.txt").read_text().splitlines())
    return dict(pairs)


def test_mass_command_on_schwarzschild(tmp_path, capsys):
    out = tmp_path / "m"
    assert main(["mass", "--out", str(out)]) == EXIT_OK
    s = _summary(out)
    assert s["status"] == "pass"
    assert float(s["mass.value"]) == pytest.approx(1.0, rel=1e-2)
    assert (out / "mass_sweep.csv").read_text().startswith("lambda,")
    assert "config_hash" in capsys.readouterr().out


def test_mass_command_on_flat_data(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = mass\n[metric]\nmodel = flat\ndim = 4\n")
    out = tmp_path / "flat"
    assert main(["--config", cfg, "--out", str(out)]) == EXIT_OK
    assert abs(float(_summary(out)["mass.value"])) < 1e-8


def test_flags_override_file(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = mass\ntol = 0.5\n[mass]\nlambdas = 10,20,40\n")
    c = load_config(cfg, {"tol": 0.05, "lambda": "30,60,120"})
    assert c.tol == 0.05
    assert c.lambdas == (30.0, 60.0, 120.0)
    assert load_config(cfg).tol == 0.5


def test_hash_ignores_output_directory(tmp_path):
    a = load_config(None, {"command": "mass", "out": "x"})
    b = load_config(None, {"command": "mass", "out": "y"})
    c = load_config(None, {"command": "mass", "out": "x", "tol": 0.02})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 16


@pytest.mark.parametrize("text", [
    "[run]\ncommand = mass\n[colour]\nx = 1\n",
    "[run]\ncommand = mass\nspeed = 3\n",
    "[run]\ncommand = mass\n[metric]\nmodel = kerr\n",
    "[run]\ncommand = mass\n[metric]\ndim = 9\n",
    "[run]\ncommand = mass\n[mass]\nlambdas = 40,20,80\n",
    "[run]\ncommand = pipeline\n[metric]\nmodel = schwarzschild\n",
    "[run]\ncommand = mass\n[metric]\nmass = abc\n",
    "[run]\n",
])
def test_bad_configs_are_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_ini(tmp_path, text))
    assert main(["--config", _ini(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_bad_flags_exit_with_config_code(tmp_path):
    assert main(["mass", "--bogus"]) == EXIT_CONFIG
    assert main(["mass", "--tol", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["mass", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_pipeline_is_deterministic(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pipeline", "--out", str(out), "--threads", "1"]) == EXIT_OK
        runs.append(((out / "summary.txt").read_bytes(), (out / "pipeline.csv").read_bytes()))
    assert runs[0] == runs[1]
    s = _summary(tmp_path / "a")
    assert float(s["pipeline.mass_drift"]) < 0.02


def test_pipeline_on_flat_halfspace_reports_absent_horizon(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = pipeline\n[metric]\nmodel = flat-halfspace\n")
    out = tmp_path / "flat"
    main(["--config", cfg, "--out", str(out)])
    text = (out / "pipeline.csv").read_text().splitlines()
    row = dict(zip(text[0].split(","), text[1].split(",")))
    assert row["area_half"] == "absent"
    assert float(row["mass_half"]) == 0.0


def test_pipeline_with_large_bump_fails_verification(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = pipeline\n[metric]\nmodel = curvature-bump-halfspace\n"
                         "amplitude = 0.01\n")
    out = tmp_path / "bump"
    assert main(["--config", cfg, "--out", str(out)]) == EXIT_VERIFY
    assert _summary(out)["status"] == "fail"


def test_perturb_check_trivial_boundary(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = perturb-check\n[perturb]\nh0 = 0,0\n")
    out = tmp_path / "p"
    assert main(["--config", cfg, "--out", str(out)]) == EXIT_OK
    assert _summary(out)["perturb.witness_delta"] == "absent"
    rows = (out / "k_scan.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[2] == "1" for r in rows)


@pytest.mark.parametrize("h0", ["-1,1", "1,-0.5", "1,1"])
def test_perturb_check_rejects_bad_curvatures(tmp_path, h0):
    cfg = _ini(tmp_path, f"[run]\ncommand = perturb-check\n[perturb]\nh0 = {h0}\n")
    assert main(["--config", cfg, "--out", str(tmp_path / "p")]) == EXIT_CONFIG


def test_perturb_check_finds_witness(tmp_path):
    cfg = _ini(tmp_path, "[run]\ncommand = perturb-check\n[perturb]\nh0 = 1,-1\ndeltas = 0.02,5e-5\n"
                         "k_values = 1,2,4\n")
    out = tmp_path / "w"
    assert main(["--config", cfg, "--out", str(out)]) == EXIT_OK
    s = _summary(out)
    assert float(s["perturb.witness_delta"]) == 5e-5
    assert float(s["perturb.selected_K"]) == 2.0
    rows = np.genfromtxt(out / "k_scan.csv", delimiter=",", names=True)
    assert rows["admissible"][rows["delta"] == 0.02].sum() == 0
