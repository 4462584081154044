import csv
import json

import numpy as np
import pytest

from muslx.cli import bundled_config, main


def small_config(tmp_path, **over):
    raw = json.loads(bundled_config("ou_linear.json").read_text())
    raw["grid"]["cells"] = 32
    raw["solver"].update({"T": 0.1, "dt": 0.01, "paths": 40})
    raw["output"] = str(tmp_path / "out")
    for k, v in over.items():
        raw[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_bundled_ou_run(tmp_path):
    out = tmp_path / "ou"
    code = main(["run", str(bundled_config("ou_linear.json")), "--paths", "60", "--out", str(out),
                 "--quiet"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert [c["name"] for c in report["checks"]] == ["energy_expectation", "ou_variance",
                                                     "step_identity"]
    assert all(c["passed"] for c in report["checks"])
    assert len(list((out / "ledgers").glob("path_*.csv"))) == 60


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"grid\": ")
    assert main(["run", str(bad)]) == 2
    assert "malformed JSON" in capsys.readouterr().err


def test_unknown_flux_names_field(tmp_path, capsys):
    cfg = small_config(tmp_path, flux={"name": "pumpkin"})
    assert main(["run", str(cfg)]) == 2
    assert "flux.name" in capsys.readouterr().err


def test_misaligned_breakpoint(tmp_path, capsys):
    cfg = small_config(tmp_path, flux={"name": "plaplace", "p": {"breakpoints": [0.055],
                                                                 "pieces": [2, 3]}})
    assert main(["run", str(cfg)]) == 2
    assert "flux.p.breakpoints" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert main(["run"]) == 2
    assert main(["cascade", str(small_config(tmp_path)), "--dial", "temperature", "--values", "1"]) == 2


def test_reruns_are_byte_identical(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--out", str(a), "--quiet"]) == 0
    assert main(["run", str(cfg), "--out", str(b), "--quiet"]) == 0
    for name in ("report.json", "report.txt", "config.json", "ledgers/path_00007.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["run", str(cfg), "--out", str(tmp_path / "c"), "--seed", "5", "--quiet"]) == 0
    assert (tmp_path / "c" / "ledgers/path_00007.csv").read_bytes() != (a / "ledgers/path_00007.csv").read_bytes()


def test_trajectories_written(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "t"
    assert main(["run", str(cfg), "--out", str(out), "--paths", "2", "--trajectories", "--quiet"]) == 0
    rows = read_rows(out / "ledgers" / "trajectory_00001.csv")
    assert len(rows) == 11
    assert len(rows[0]) == 2 + 31


def test_verify_on_stored_ledgers(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "v"
    assert main(["run", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert main(["verify", str(out)]) == 0
    text = capsys.readouterr().out
    assert "energy_expectation" in text and "ou_variance" in text
    # zero bias allowance and a mid-run time still evaluate
    assert main(["verify", str(out), "--t-check", "0.05", "--quiet"]) in (0, 1)
    assert main(["verify", str(tmp_path / "nowhere")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_solver_failure_exit_3(tmp_path, capsys):
    # the state overflows after a couple of steps of absurd multiplicative noise
    cfg = small_config(tmp_path, noise={"type": "multiplicative", "modes": 1, "amplitudes": [1e200]},
                       checks=["energy_expectation"])
    code = main(["run", str(cfg), "--paths", "1", "--quiet"])
    assert code == 3
    assert "solver error" in capsys.readouterr().err


# -- cascades ----------------------------------------------------------------------


def test_mode_cascade_single_value(tmp_path):
    cfg = small_config(tmp_path, noise={"type": "additive", "modes": 4, "amplitudes": "geometric:0.5"})
    out = tmp_path / "m"
    assert main(["cascade", str(cfg), "--dial", "modes", "--values", "4", "--out", str(out),
                 "--quiet"]) == 0
    rows = read_rows(out / "cascade.csv")
    assert len(rows) == 1 and rows[0]["lhs_mean"] == ""


def test_mode_cascade_rows(tmp_path):
    cfg = small_config(tmp_path, noise={"type": "additive", "modes": 4, "amplitudes": "geometric:0.5"})
    out = tmp_path / "m"
    assert main(["cascade", str(cfg), "--dial", "modes", "--values", "2,4,8", "--paths", "20",
                 "--out", str(out), "--quiet"]) == 0
    rows = read_rows(out / "cascade.csv")
    assert len(rows) == 2
    assert all(float(r["lhs_mean"]) > 0 for r in rows)


def test_eps_cascade(tmp_path):
    cfg = small_config(tmp_path, regularization={"eps": 0.0, "young": "power:3"})
    out = tmp_path / "e"
    assert main(["cascade", str(cfg), "--dial", "eps", "--values", "0.1,0.01", "--paths", "10",
                 "--out", str(out), "--quiet"]) == 0
    rows = read_rows(out / "cascade.csv")
    assert len(rows) == 1 and float(rows[0]["lhs_mean"]) >= 0
    assert main(["cascade", str(cfg), "--dial", "eps", "--values", "", "--out", str(out)]) == 2
    assert main(["cascade", str(cfg), "--dial", "eps", "--values", "0.01,0.1", "--out", str(out)]) == 2


def test_eps_cascade_needs_young(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["cascade", str(cfg), "--dial", "eps", "--values", "0.1,0.01", "--quiet"]) == 2


# -- conjugate tables ---------------------------------------------------------------


@pytest.mark.parametrize("p", [2, 3])
def test_conjugate_table_power(tmp_path, p):
    out = tmp_path / f"c{p}.csv"
    assert main(["conjugate-table", f"power:{p}", "--out", str(out), "--grid", "0.01,100,200",
                 "--quiet"]) == 0
    data = np.genfromtxt(out, delimiter=",", names=True)
    q = p / (p - 1)
    np.testing.assert_allclose(data["conjugate"], data["x"] ** q / q, rtol=1e-3)
    assert data.size == 200


def test_conjugate_table_unknown(tmp_path, capsys):
    assert main(["conjugate-table", "cosh", "--out", str(tmp_path / "x.csv")]) == 2
    assert "name" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["ou_linear.json", "double_phase.json", "multiplicative_picard.json",
                                  "piecewise_exponent.json"])
def test_bundled_configs_parse(name):
    from muslx.config import load_config

    cfg = load_config(bundled_config(name))
    assert cfg.solver_config().steps == int(round(cfg.T / cfg.dt))
