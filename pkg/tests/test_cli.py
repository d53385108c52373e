import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from sysrisk.cli import main
from sysrisk.model import save_problem


@pytest.fixture
def toy_file(tmp_path, toy):
    path = tmp_path / "toy.json"
    save_problem(toy, path)
    return path


@pytest.fixture
def disaster_file(tmp_path):
    path = tmp_path / "inst.json"
    assert main(["gen", "--seed", "0", "--scenarios", "10", "--out", str(path)]) == 0
    return path


def test_gen_is_deterministic(tmp_path, capsys):
    a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "c.json"
    main(["gen", "--seed", "5", "--out", str(a)])
    main(["gen", "--seed", "5", "--out", str(b)])
    main(["gen", "--seed", "6", "--out", str(c)])
    lines = capsys.readouterr().out.splitlines()
    assert a.read_bytes() == b.read_bytes()
    digests = [line.split("demand=")[1].split()[0] for line in lines]
    assert digests[0] == digests[1] != digests[2]
    assert lines[0].startswith("seed=5 N=10 demand=")


def test_gen_into_directory(tmp_path):
    assert main(["gen", "--seed", "2", "--scenarios", "4", "--out", str(tmp_path / "d")]) == 0
    data = json.loads((tmp_path / "d" / "disaster_N4_seed2.json").read_text())
    assert len(data["demand"]) == 4


def test_invalid_inputs_exit_3(tmp_path, disaster_file, capsys):
    assert main(["gen", "--scenarios", "0", "--out", str(tmp_path / "x.json")]) == 3
    assert main(["solve", str(disaster_file), "--tau", "0.5", "--out", str(tmp_path / "o")]) == 3
    assert "tau < 1/m" in capsys.readouterr().err
    assert main(["solve", str(disaster_file), "--aggregation", "median", "--out", str(tmp_path / "o")]) == 3
    assert main(["solve", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 3


def test_config_file(tmp_path, toy_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "centralized", "aggregation": "semideviation"}))
    out = tmp_path / "o"
    assert main(["solve", str(toy_file), "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads((out / "solution.json").read_text())["method"] == "centralized"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    assert main(["solve", str(toy_file), "--config", str(bad), "--out", str(out)]) == 3


def test_distributed_matches_centralized(tmp_path, toy_file):
    c_out, d_out = tmp_path / "c", tmp_path / "d"
    assert main(["solve", str(toy_file), "--method", "centralized", "--out", str(c_out)]) == 0
    assert main(["solve", str(toy_file), "--out", str(d_out)]) == 0
    c = json.loads((c_out / "solution.json").read_text())
    d = json.loads((d_out / "solution.json").read_text())
    assert c["schema"] == d["schema"] == "sysrisk/solution@1"
    assert d["converged"]
    assert abs(d["objective"] - c["objective"]) / (1 + abs(c["objective"])) < 1e-3
    with open(d_out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == d["iterations"]
    assert [int(r["iter"]) for r in rows] == list(range(1, d["iterations"] + 1))
    assert "converged" in (d_out / "summary.txt").read_text()


def test_iteration_cap_exit_2(tmp_path, toy_file):
    out = tmp_path / "o"
    assert main(["solve", str(toy_file), "--max-iter", "5", "--out", str(out)]) == 2
    sol = json.loads((out / "solution.json").read_text())
    assert sol["converged"] is False and sol["iterations"] == 5


def test_compare_centralized(tmp_path, disaster_file):
    out = tmp_path / "cmp"
    assert main(["compare", str(disaster_file), "--method", "centralized", "--out", str(out)]) == 0
    for name in ("risk.csv", "allocation.csv", "spread.csv", "report.txt"):
        assert (out / name).exists()
    with open(out / "allocation.csv") as fh:
        alloc = list(csv.DictReader(fh))
    assert len(alloc) == 3
    assert all(float(r["total"]) <= 25.0 + 1e-6 for r in alloc)
    with open(out / "risk.csv") as fh:
        risk = list(csv.DictReader(fh))
    exp = risk[0]
    thetas = [float(exp[f"theta_{i}"]) for i in range(1, 6)]
    assert float(exp["rho_sys"]) == pytest.approx(np.mean(thetas), abs=1e-5)
    with open(out / "spread.csv") as fh:
        spread = {r["aggregation"]: float(r["spread"]) for r in csv.DictReader(fh)}
    assert spread["semideviation"] <= spread["expectation"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sysrisk", "gen", "--seed", "1", "--out", str(tmp_path / "g.json")],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0, res.stderr
    assert "seed=1" in res.stdout
