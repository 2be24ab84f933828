from __future__ import annotations

import json
import subprocess
import sys

import pytest

from branchmerge import __version__
from branchmerge.cli import build_parser, effective_config, main

from conftest import write_tree
from test_scenarios import MINI


@pytest.fixture
def mini(tmp_path):
    src = write_tree(tmp_path / "repo", MINI["repo"])
    traces = tmp_path / "traces.json"
    traces.write_text(json.dumps(MINI["traces"]))
    return src, traces


def args(*argv: str):
    return build_parser().parse_args(list(argv))


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out


def test_precedence_file_then_flags_then_set(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_engineers": 3, "seed": 1, "max_rounds": 5}))
    cfg = effective_config(args("run", "--repo", ".", "--config", str(tmp_path / "c.json"),
                                "--n-engineers", "4", "--set", "n_engineers=6", "--rounds", "7"))
    assert (cfg.n_engineers, cfg.seed, cfg.max_rounds) == (6, 1, 7)


def test_run_completes(mini, tmp_path, capsys):
    src, traces = mini
    code = main(["run", "--repo", str(src), "--out", str(tmp_path / "out"), "--n-engineers", "1",
                 "--traces", str(traces)])
    summary = json.loads(capsys.readouterr().out)
    assert code == 0 and summary["termination"] == "completed" and summary["metrics"]["score"] == 1.0
    assert json.loads((tmp_path / "out" / "config.echo.json").read_text())["traces"] == str(traces)


def test_run_limit_exit_code(mini, tmp_path, capsys):
    src, _ = mini
    code = main(["run", "--repo", str(src), "--out", str(tmp_path / "out"), "--n-engineers", "1",
                 "--set", "engineer_max_iterations=1"])
    assert code == 3
    assert json.loads(capsys.readouterr().out)["remaining_units"] == ["m/one.py"]


def test_run_fatal_exit_code(mini, tmp_path):
    src, _ = mini
    traces = tmp_path / "stubborn.json"
    traces.write_text(json.dumps({"manager": {"steps": [{"when": {}, "text": "no plan today", "repeat": True}]}}))
    assert main(["run", "--repo", str(src), "--out", str(tmp_path / "out"), "--traces", str(traces)]) == 1


@pytest.mark.parametrize("argv", [
    ["run", "--repo", "{tmp}/nowhere"],
    ["run", "--repo", "{tmp}", "--set", "colour=blue"],
    ["run", "--repo", "{tmp}", "--set", "n_engineers=zero"],
    ["run", "--repo", "{tmp}", "--config", "{tmp}/absent.json"],
    ["simulate", "no_such_scenario"],
    ["simulate"],
    ["report", "{tmp}/absent.jsonl"],
    ["validate", "--traces", "{tmp}/absent.json"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main([a.format(tmp=tmp_path) for a in argv]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_key_in_config_file(tmp_path):
    (tmp_path / "c.txt").write_text("colour = blue\n")
    assert main(["validate", "--config", str(tmp_path / "c.txt")]) == 2


def test_simulate_list(capsys):
    assert main(["simulate", "--list"]) == 0
    assert "chain" in capsys.readouterr().out.split()


def test_simulate_expectation_failure_exit_4(tmp_path, capsys):
    doc = {**MINI, "expect": {"all": {"termination": "rounds_exhausted"}}}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "out")]) == 4
    assert "FAILED" in capsys.readouterr().out
    assert json.loads((tmp_path / "out" / "comparison.json").read_text())["passed"] is False


def test_simulate_ok_and_report(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps(MINI))
    assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path / "sim")]) == 0
    capsys.readouterr()
    log = tmp_path / "sim" / "worktree" / "events.jsonl"
    assert main(["report", str(log), "--out", str(tmp_path / "rep")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["metrics"] == json.loads((tmp_path / "sim" / "worktree" / "metrics.json").read_text())
    assert (tmp_path / "rep" / "gantt.json").read_bytes() == (tmp_path / "sim" / "worktree" / "gantt.json").read_bytes()


def test_report_corrupt_log(tmp_path):
    (tmp_path / "e.jsonl").write_text("garbage\n")
    assert main(["report", str(tmp_path / "e.jsonl")]) == 2


def test_validate(mini, tmp_path, capsys):
    _, traces = mini
    (tmp_path / "s.json").write_text(json.dumps(MINI))
    assert main(["validate", "--traces", str(traces), "--scenario", str(tmp_path / "s.json")]) == 0
    assert capsys.readouterr().out.startswith("valid: config, traces")
    (tmp_path / "bad.json").write_text(json.dumps({**MINI, "modes": []}))
    assert main(["validate", "--scenario", str(tmp_path / "bad.json")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "branchmerge", "simulate", "--list"], capture_output=True, text=True)
    assert proc.returncode == 0 and "overlap_n8" in proc.stdout
