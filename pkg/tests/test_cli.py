import json

import pytest

from idyn import acceptance
from idyn.cli import main, parse_counts
from idyn.errors import ConfigError


def test_run_csv(tmp_path, capsys):
    out = tmp_path / "r.csv"
    code = main(["run", "--scenario", "resting_box", "--controller", "id-now", "--solver", "qp",
                 "--friction", "mu=0.6", "--duration", "0.05", "--out", str(out), "--no-timing"])
    assert code == 0
    assert len(out.read_text().splitlines()) == 51
    assert "resting_box" in capsys.readouterr().out


def test_run_json_from_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "free_flight", "duration": 0.02,
                               "controller": {"kind": "PID"}}))
    out = tmp_path / "r.json"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["summary"]["steps"] == 20


@pytest.mark.parametrize("argv", [
    ["run", "--scenario", "nowhere", "--out", "x.csv"],
    ["run", "--scenario", "resting_box", "--friction", "sticky", "--out", "x.csv"],
    ["run", "--config", "/nonexistent/c.json", "--out", "x.csv"],
    ["run", "--out", "x.csv"],
    ["sweep-timing", "--contacts", "9..3", "--out", "x.csv"],
    ["frobnicate"],
])
def test_config_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = main(argv)
    except SystemExit as e:
        code = e.code
    assert code == 1


def test_bad_json_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r.csv")]) == 1


def test_unwritable_output(tmp_path):
    assert main(["run", "--scenario", "free_flight", "--duration", "0.01",
                 "--out", str(tmp_path / "missing" / "r.csv")]) == 1


def test_sweep(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["sweep-timing", "--contacts", "4,8", "--reps", "2", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 5


def test_verify_pass_and_fail(monkeypatch, capsys):
    assert main(["verify", "--only", "2"]) == 0
    assert "[PASS]" in capsys.readouterr().out
    monkeypatch.setitem(acceptance.CRITERIA, 2, lambda: acceptance.CriterionResult(2, "flops", False, "forced"))
    assert main(["verify", "--only", "2"]) == 2


def test_verify_bad_list():
    assert main(["verify", "--only", "one"]) == 1


def test_parse_counts():
    assert parse_counts("4..16") == [4, 8, 12, 16]
    assert parse_counts("2..6:2") == [2, 4, 6]
    assert parse_counts("1,5") == [1, 5]
    with pytest.raises(ConfigError):
        parse_counts("x..y")
