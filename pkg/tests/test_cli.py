import json
import os

import pytest

from mfslq import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_solve_writes_outputs(tmp_path, capsys):
    assert run("solve", "cp_lq1", "--dt", 0.01, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "solution.json").read_text())
    assert doc["P0"][0][0] == pytest.approx(0.5, abs=1e-10)
    assert doc["manifest"]["command"] == "solve" and len(doc["manifest"]["input_sha256"]) == 64
    assert {"gain.csv", "riccati.csv", "means.csv", "phi.csv"} <= set(os.listdir(tmp_path))
    assert not any(f.endswith(".png") for f in os.listdir(tmp_path))


def test_invalid_weight_exits_2(tmp_path, capsys):
    f = tmp_path / "bad.toml"
    f.write_text('n = 1\nm = 1\nT = 1.0\nn_steps = 10\nx0 = [1.0]\n[coefficients]\nB = 1.0\nR = 1.0\nQ = -1.0\n')
    assert run("solve", f, "--out", tmp_path / "o") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["coefficient"] == "Q"


def test_missing_file_exits_2(tmp_path, capsys):
    assert run("solve", tmp_path / "nope.toml", "--out", tmp_path) == 2


def test_simulate_is_reproducible(tmp_path):
    assert run("solve", "cp_j1", "--dt", 0.05, "--out", tmp_path / "sol") == 0
    sol = tmp_path / "sol" / "solution.json"

    def sim(name, seed):
        d = tmp_path / name
        assert run("simulate", "cp_j1", "--solution", sol, "--paths", 1, "--seed", seed, "--out", d) == 0
        return {f: [ln for ln in (d / f).read_text().splitlines() if not ln.startswith("# ")]
                for f in sorted(os.listdir(d)) if f.endswith(".csv")}

    first = sim("a", 7)
    assert first == sim("b", 7)
    assert first["paths.csv"] != sim("c", 8)["paths.csv"]


@pytest.fixture(scope="module")
def mf_solved(tmp_path_factory):
    d = tmp_path_factory.mktemp("mf")
    assert run("solve", "mf1", "--dt", 0.02, "--out", d) == 0
    return d


def test_verify_detects_corrupted_gain(mf_solved, tmp_path):
    doc = json.loads((mf_solved / "solution.json").read_text())
    doc["gain"] = [[[g[0][0] * 1.3]] for g in doc["gain"]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("verify", "mf1", bad, "--checks", "stationarity", "--paths", 200, "--out", tmp_path) == 4
    rep = json.loads((tmp_path / "verification.json").read_text())
    assert rep["checks"]["stationarity"]["passed"] is False


def test_verify_without_checks(mf_solved, tmp_path):
    assert run("verify", "mf1", mf_solved / "solution.json", "--checks", "none", "--out", tmp_path) == 0


def test_oracle_guard_and_dominance(tmp_path, capsys):
    assert run("oracle", "mf1", "--steps", 20, "--out", tmp_path) == 2
    assert "TreeTooLarge" in capsys.readouterr().err
    assert run("oracle", "cp_lq1", "--steps", 4, "--out", tmp_path) == 0
    body = json.loads((tmp_path / "comparison.json").read_text())
    assert body["oracle_dominates"]


def test_plot_flag_writes_png(tmp_path):
    pytest.importorskip("matplotlib")
    assert run("solve", "cp_j1", "--dt", 0.02, "--plot", "--out", tmp_path) == 0
    assert (tmp_path / "solution.png").stat().st_size > 1000
