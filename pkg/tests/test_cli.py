import json
from pathlib import Path

import numpy as np
import pytest

from mflab.checks import exponential_series
from mflab.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GOLDEN = CONFIGS / "gd-linear-tanh.toml"

SHORT = """
seed = 1
[model]
kind = "linear-tanh"
d = 1
[data]
n = 3
[path]
L = 2
N = 3
[flow]
lam = 0.1
dtau = 0.05
tau_max = {tau_max}
[io]
snapshot_every = 4
"""


def short_config(tmp_path, tau_max=1.0):
    f = tmp_path / f"short-{tau_max}.toml"
    f.write_text(SHORT.format(tau_max=tau_max))
    return f


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_flags_are_config_errors(tmp_path):
    assert main(["run", "--config", str(GOLDEN), "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["w2-selftest", "--threads", "0"]) == 2
    assert main(["convexity-probe", "--config", str(GOLDEN), "--grid-points", "1",
                 "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_zero_horizon_writes_one_record(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(short_config(tmp_path, 0.0)), "--out", str(out)]) == 0
    lines = (out / "trace.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"tau,J,L,reg,slope,support_radius,dirichlet,step_size,accepted"
    assert len([ln for ln in lines if ln]) == 2
    report = json.loads((out / "report.json").read_text())
    assert report["steps"] == 0 and report["stop_reason"] == "tau_max"


def test_run_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(short_config(tmp_path)), "--out", str(out)]) == 0
    snaps = sorted(p.name for p in (out / "snapshots").iterdir())
    assert snaps == ["record_00000000.mflb", "record_00000004.mflb", "record_00000008.mflb",
                     "record_00000012.mflb", "record_00000016.mflb", "record_00000020.mflb"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run" and manifest["seed"] == 1
    for key in ("python", "numpy", "scipy", "numba", "mflab_version", "config"):
        assert key in manifest
    report = json.loads((out / "report.json").read_text())
    assert {"alpha", "C", "branch", "R2", "j_star", "checks"} <= set(report)


def test_run_is_deterministic_and_seed_overridable(tmp_path):
    cfg = str(short_config(tmp_path))
    for name, extra in (("a", []), ("b", []), ("c", ["--seed", "2"])):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / name)] + extra) == 0
    a, b, c = ((tmp_path / n / "trace.csv").read_bytes() for n in "abc")
    assert a == b and a != c
    assert ((tmp_path / "a" / "snapshots" / "record_00000020.mflb").read_bytes()
            == (tmp_path / "b" / "snapshots" / "record_00000020.mflb").read_bytes())


def test_output_dir_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MFLAB_OUT", str(tmp_path / "env"))
    assert main(["run", "--config", str(short_config(tmp_path, 0.0))]) == 0
    assert (tmp_path / "env" / "trace.csv").is_file()


@pytest.mark.parametrize("model", ["linear-tanh", "gated-tanh"])
def test_grad_check_passes(model, tmp_path, capsys):
    assert main(["grad-check", "--config", str(GOLDEN), "--model", model]) == 0
    assert "PASS" in capsys.readouterr().out


def test_grad_check_flags_perturbed_gradient():
    assert main(["grad-check", "--config", str(GOLDEN), "--perturb-gradient", "1e-3"]) == 4


def test_w2_selftest(capsys):
    assert main(["w2-selftest", "--seed", "0", "--instances", "50"]) == 0
    assert "50 instances" in capsys.readouterr().out


def test_rate_fit_on_synthetic_trace(tmp_path):
    tau, J, slope = exponential_series(0.5, j_star=0.25, tau_max=30.0)
    f = tmp_path / "trace.csv"
    rows = "".join(f"{t:.17g},{j:.17g},{s:.17g}\r\n" for t, j, s in zip(tau, J, slope))
    f.write_text("tau,J,slope\r\n" + rows, newline="")
    assert main(["rate-fit", str(f), "--out", str(tmp_path / "fit")]) == 0
    report = json.loads((tmp_path / "fit" / "report.json").read_text())
    assert report["branch"] == "exponential"
    assert report["rate"] == pytest.approx(0.5, rel=0.02)


def test_rate_fit_rejects_bad_input(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["rate-fit", str(empty), "--out", str(tmp_path)]) == 2
    flat = tmp_path / "flat.csv"
    flat.write_text("tau,J,slope\r\n0,1,0\r\n1,1,0\r\n2,1,0\r\n3,1,0\r\n4,1,0\r\n5,1,0\r\n")
    assert main(["rate-fit", str(flat), "--out", str(tmp_path)]) == 3


def test_convexity_probe_small(tmp_path):
    out = tmp_path / "cvx"
    assert main(["convexity-probe", "--config", str(short_config(tmp_path)), "--geodesics", "3",
                 "--grid-points", "3", "--out", str(out)]) == 0
    report = json.loads((out / "convexity.json").read_text())
    assert report["geodesics"] == 3 and report["finite"]
    assert np.isfinite(report["max_lipschitz"])
    assert (out / "manifest.json").is_file()
