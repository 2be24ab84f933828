from __future__ import annotations

import json

import pytest

from branchmerge.errors import ScenarioError
from branchmerge.scenarios import bundled_names, check, load_scenario, parse_scenario, simulate

MINI = {
    "name": "mini",
    "repo": {
        "m/__init__.py": "",
        "m/one.py": "def one():\n    raise NotImplementedError\n",
        "tests/test_one.py": "from m.one import one\n\n\ndef test_one():\n    assert one() == 1\n",
    },
    "config": {"n_engineers": 1},
    "modes": ["worktree"],
    "traces": {"engineer-1": {"steps": [{"when": {"last_event": "assigned"}, "actions": [
        {"kind": "edit_file", "payload": {"path": "m/one.py", "old": "    raise NotImplementedError\n",
                                          "new": "    return 1\n"}},
        {"kind": "commit_request", "payload": {"message": "one"}}]}]}},
    "expect": {"all": {"termination": "completed", "score_min": 1.0}},
}


def test_bundled_catalogue():
    assert bundled_names() == sorted(
        ["budget_exhaustion", "chain", "chain_review", "conflict_pair", "overlap_n8", "rounds_exhaustion",
         "verify_retry"])


def test_every_bundled_scenario_meets_its_expectations(bundled_runs):
    for name, (outcome, out) in bundled_runs.items():
        for mode, body in outcome["modes"].items():
            assert body["expectation_failures"] == [], (name, mode)
        assert outcome["passed"]
        assert json.loads((out / "comparison.json").read_text())["passed"] is True


def test_verify_retry_really_retries(bundled_runs):
    outcome, out = bundled_runs["verify_retry"]
    for mode in outcome["modes"]:
        decisions = [json.loads(line)["detail"].get("decision")
                     for line in (out / mode / "events.jsonl").read_text().splitlines()
                     if json.loads(line)["kind"] == "verify"]
        assert "retry" in decisions and decisions.count("allow") >= 3


def test_review_mode_consults_the_manager(bundled_runs):
    outcome, out = bundled_runs["chain_review"]
    kinds = [json.loads(line)["kind"] for line in (out / "worktree" / "events.jsonl").read_text().splitlines()]
    assert kinds.count("review") >= 3


def test_simulate_mini_and_failed_expectation(tmp_path):
    scenario = parse_scenario(MINI)
    assert simulate(scenario, tmp_path / "a")["passed"]
    wrong = parse_scenario({**MINI, "expect": {"worktree": {"conflicts": 2, "termination": "rounds_exhausted"}}})
    outcome = simulate(wrong)
    assert not outcome["passed"]
    assert len(outcome["modes"]["worktree"]["expectation_failures"]) == 2


def test_overrides_apply_but_mode_wins(tmp_path):
    outcome = simulate(parse_scenario(MINI), modes=["soft"], overrides={"isolation": "worktree", "seed": 9})
    assert list(outcome["modes"]) == ["soft"]


@pytest.mark.parametrize("doc, fragment", [
    ({}, "empty"),
    ([], "empty"),
    ({**MINI, "colour": 1}, "unknown keys"),
    ({**MINI, "repo": {}}, "'repo'"),
    ({**MINI, "repo": {"../x.py": ""}}, "escapes"),
    ({**MINI, "modes": ["none"]}, "'modes'"),
    ({**MINI, "expect": {"later": {}}}, "scope"),
    ({**MINI, "expect": {"all": {"vibes": 1}}}, "unknown expectation"),
    ({**MINI, "config": {"n_engineers": 0}}, "n_engineers"),
    ({**MINI, "traces": {"engineer-1": {"steps": [{"bogus": 1}]}}}, "bogus"),
])
def test_parse_scenario_errors(doc, fragment):
    with pytest.raises(ScenarioError, match=fragment):
        parse_scenario(doc)


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "absent.json")
    (tmp_path / "empty.json").write_text("  \n")
    with pytest.raises(ScenarioError, match="empty"):
        load_scenario(tmp_path / "empty.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ScenarioError, match="invalid JSON"):
        load_scenario(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps(MINI))
    assert load_scenario(tmp_path / "ok.json").name == "mini"
    assert load_scenario("chain").name == "chain"


def test_check_reports_each_unmet_expectation():
    summary = {"termination": "completed", "remaining_units": [], "interference": 2,
               "interference_by_kind": {"concurrent_write": 1}, "delegation_warnings": 0, "conflicts": 1,
               "resolving_cycles": 1, "salvage_commits": 0, "score": None}
    assert check(summary, {"termination": "completed", "conflicts": 1, "interference_min": 1}) == []
    failures = check(summary, {"interference_max": 1, "concurrent_write_min": 2, "delegation_warnings_min": 1,
                               "salvage_commits_min": 1, "score_min": 0.5, "remaining_units": ["a"]})
    assert len(failures) == 6
