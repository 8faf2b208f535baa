"""End-to-end acceptance checks, one test group per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see
conftest.py). Everything runs offline against the fixture testbed with
scripted model responses.
"""

from __future__ import annotations

import json
import string
import sys
import time
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restmeta.cli import main
from restmeta.errors import NoArrayFound
from restmeta.executor import FAILED_PLACEHOLDER, PASSED, format_sequence, parse_sequence
from restmeta.lenient import loads_array
from restmeta.llm import ScriptedClient
from restmeta.mtmodel import normalize_title
from restmeta.plan import RelationAssertion, check_relation, json_includes
from restmeta.reporting import diff_sequences, persist_session, read_results
from restmeta.session import (
    COVERAGE_TARGET,
    PLATEAU,
    REQUEST_BUDGET,
    TIME_BUDGET,
    SessionConfig,
    SessionState,
    account_progress,
    run_session,
    should_stop,
)
from restmeta.specmodel import bundled_spec_path, load_spec
from restmeta.testbed import RESET_PATH, canned_scenarios, iteration_responses, scenario

WORKED = scenario("status-update")
WORKED_SEQUENCE = "POST /pet -> GET /pet/{petId} -> POST /pet/{petId} -> GET /pet/{petId}"


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def scripted_session(spec, tb, responses, **config):
    return run_session(
        spec, tb.base_url, SessionConfig(**config), ScriptedClient(responses),
        session_id=f"acc-{time.monotonic_ns()}", before_scenario=lambda p: tb.reset(),
    )


def executed_iterations(report):
    return [s for s in report.iterations if s.metrics.hlmt_count]


# 1 ---------------------------------------------------------------------------------


@criterion(1, "operation counts: PetStore 19, UserManagement 28")
@pytest.mark.parametrize("name, expected", [("petstore", 19), ("usermanagement", 28)])
def test_c01_spec_counts(name, expected):
    start = time.perf_counter()
    spec = load_spec(bundled_spec_path(name))
    elapsed = time.perf_counter() - start
    assert len(spec.operations) == expected
    assert len({op.key for op in spec.operations}) == expected
    assert elapsed < 1.0


# 2 ---------------------------------------------------------------------------------


@criterion(2, "worked-example slug reproduced exactly")
def test_c02_slug():
    title = "Updating a pet's status should be observable when retrieving that pet by its identifier."
    assert normalize_title(title) == (
        "updating_a_pet_s_status_should_be_observable_when_retrieving_that_pet_by_its_identifier"
    )
    assert WORKED.hlmt.scenario_title == title


# 3 ---------------------------------------------------------------------------------


@criterion(3, "worked example passes on the correct service")
def test_c03_worked_example_correct_service(petstore, clean_testbed):
    start = time.perf_counter()
    report = scripted_session(petstore, clean_testbed, iteration_responses([WORKED]))
    elapsed = time.perf_counter() - start
    (only,) = executed_iterations(report)
    assert only.iteration_index == 1
    (result,) = report.results()
    assert result.verdict == PASSED
    assert result.requests_spent == 4 and report.requests_spent == 4
    assert format_sequence(result.sequence) == WORKED_SEQUENCE
    assert elapsed < 5.0


# 4 ---------------------------------------------------------------------------------


@criterion(4, "worked example fails with relation-violation when the status update is dropped")
def test_c04_worked_example_fault(petstore, faulty_testbed):
    tb = faulty_testbed("drop-status-update")
    report = scripted_session(petstore, tb, iteration_responses([WORKED]))
    (result,) = report.results()
    assert result.verdict == "failed"
    assert result.failure_class.kind == "relation-violation"
    # the first assertion (status before the update) holds; the status difference does not
    assert [v for _, v, _ in result.relation_verdicts] == ["holds", "violated"]


# 5 ---------------------------------------------------------------------------------

TAXONOMY = [
    ("reject-missing-field", "request-contract"),
    ("invalid-expires-header", "response-contract"),
    ("crash-on-sequence", "server-crash"),
    ("slow-endpoint", "timeout"),
]


@criterion(5, "single-fault runs yield exactly one failure class each")
@pytest.mark.slow
@pytest.mark.parametrize("fault, expected", TAXONOMY)
def test_c05_failure_taxonomy(petstore, faulty_testbed, fault, expected):
    tb = faulty_testbed(fault)
    config = SessionConfig()
    tb.profile.check_timeout(config.per_request_timeout)
    report = scripted_session(petstore, tb, iteration_responses(canned_scenarios()))
    classes = Counter(r.failure_class.kind for r in report.results() if r.failure_class)
    assert classes == Counter({expected: 1})
    (failed,) = [r for r in report.results() if not r.passed]
    assert failed.hlmt_id == next(s.hlmt.id for s in canned_scenarios() if s.fault == fault)


# 6 ---------------------------------------------------------------------------------


def _state(**kw):
    s = SessionState(total_operations=19, started_at=100.0)
    for k, v in kw.items():
        setattr(s, k, v)
    return s


@criterion(6, "stop reasons fire exactly at the defaults; progress resets the plateau")
def test_c06_stopping_defaults():
    c = SessionConfig()
    assert not should_stop(_state(requests_spent=999), c, 100.0)
    assert should_stop(_state(requests_spent=1000), c, 100.0).reason == REQUEST_BUDGET
    assert not should_stop(_state(), c, 100.0 + 30 * 60 - 0.001)
    assert should_stop(_state(), c, 100.0 + 30 * 60).reason == TIME_BUDGET
    assert not should_stop(_state(plateau_counter=4), c, 100.0)
    assert should_stop(_state(plateau_counter=5), c, 100.0).reason == PLATEAU
    ops = [("GET", f"/op{i}") for i in range(19)]
    assert not should_stop(_state(covered_operations=frozenset(ops[:18])), c, 100.0)
    assert should_stop(_state(covered_operations=frozenset(ops)), c, 100.0).reason == COVERAGE_TARGET

    s = _state(plateau_counter=4)
    assert account_progress(s, new_slugs=1, coverage_gain=0.0).plateau_counter == 0
    assert account_progress(s, new_slugs=0, coverage_gain=5.26).plateau_counter == 0
    assert account_progress(s, new_slugs=0, coverage_gain=0.0).plateau_counter == 5


@criterion(6, "stop reasons fire exactly at the defaults; progress resets the plateau")
def test_c06_plateau_in_a_session(petstore, clean_testbed):
    responses = [r for _ in range(7) for r in iteration_responses([WORKED])]
    report = scripted_session(petstore, clean_testbed, responses)
    assert report.stop_reason == PLATEAU
    assert [s.plateau_counter for s in report.iterations] == [0, 1, 2, 3, 4, 5]


# 7 ---------------------------------------------------------------------------------


def _invalid_plan():
    doc = WORKED.plan.to_dict()
    doc["when_steps"] = [{"method": "PATCH", "path": "/pet/{petId}", "path_args": {"petId": "${pid}"}}]
    return json.dumps(doc)


@criterion(7, "exhausted repairs give a zero-request placeholder excluded from EMT counts")
@pytest.mark.parametrize(
    "outputs",
    [
        ["this is not a plan", _invalid_plan(), "{'given_steps': []}"],  # generation and both repairs invalid
        ["this is not a plan", _invalid_plan()],  # two invalid, then the script runs dry
    ],
    ids=["three-invalid", "two-invalid-then-nothing"],
)
def test_c07_repair_placeholder(petstore, clean_testbed, outputs):
    responses = iteration_responses([WORKED], plan_overrides={WORKED.hlmt.id: outputs})
    report = scripted_session(petstore, clean_testbed, responses, repair_max_attempts=2)
    first = report.iterations[0]
    (result,) = report.results()
    assert result.verdict == FAILED_PLACEHOLDER
    assert result.requests_spent == 0 and result.step_outcomes == ()
    assert first.metrics.hlmt_count == 1 and first.metrics.emt_count == 0
    assert first.placeholders == 1 and first.repair_attempts == 2
    assert report.totals.emt_count == 0 and report.requests_spent == 0


# 8 ---------------------------------------------------------------------------------

_text = st.text(alphabet=string.ascii_letters + string.digits + " '\",:[]{}\\\n\té", max_size=40)
_hlmt_arrays = st.lists(
    st.fixed_dictionaries({"id": st.from_regex(r"MR[0-9]{1,3}", fullmatch=True), "scenario": _text,
                           "given": _text, "when": _text, "then": _text},
                          optional={"ok": st.booleans(), "none": st.none()}),
    min_size=1, max_size=5,
)


def _render(value, scalar, trailing=""):
    """Serialize with a custom scalar renderer, optionally leaving a comma after every member."""
    if isinstance(value, list):
        items = [_render(v, scalar, trailing) for v in value]
        return "[" + ", ".join(items) + (trailing if items else "") + "]"
    if isinstance(value, dict):
        items = [f"{scalar(k)}: {_render(v, scalar, trailing)}" for k, v in value.items()]
        return "{" + ", ".join(items) + (trailing if items else "") + "}"
    return scalar(value)


def _single_quoted(x):
    return repr(x) if isinstance(x, str) else json.dumps(x)


REPAIR_CLASSES = {
    "fences": lambda v: "Here are the tests.\n```json\n" + json.dumps(v) + "\n```",
    "single-quotes": lambda v: _render(v, _single_quoted),
    "trailing-commas": lambda v: _render(v, json.dumps, ","),
    "python-literals": repr,
    "combined": lambda v: "```\n" + _render(v, repr, ",") + "\n```",
}


@criterion(8, "lenient parsing round-trips every supported repair class")
@settings(max_examples=100, deadline=None)
@given(value=_hlmt_arrays)
def test_c08_lenient_round_trip(value):
    for name, mutate in REPAIR_CLASSES.items():
        assert loads_array(mutate(value)) == value, name


@criterion(8, "lenient parsing round-trips every supported repair class")
@pytest.mark.parametrize("garbage", ["", "no tests today", "[1 2", "{'a': 1}", "[oops no]", "]["])
def test_c08_garbage(garbage):
    with pytest.raises(NoArrayFound):
        loads_array(garbage)


# 9 ---------------------------------------------------------------------------------

_small_json = st.recursive(
    st.none() | st.booleans() | st.integers(-2, 2) | st.sampled_from([1.0, 0.5]) | st.text("xy", max_size=2),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text("xy", max_size=1), inner, max_size=2),
    max_leaves=6,
)


def _holds(kind, left, right):
    return check_relation(RelationAssertion(kind, "${a}", None), left, right).holds


@criterion(9, "relation predicates are complementary and inclusion matches membership")
@settings(max_examples=1000, deadline=None)
@given(_small_json, _small_json)
def test_c09_complementarity(a, b):
    assert _holds("equality", a, b) != _holds("difference", a, b)
    assert _holds("inclusion", a, b) != _holds("exclusion", a, b)


def _member(array, item):
    def same(x, y):
        if isinstance(x, bool) or isinstance(y, bool) or x is None or y is None or isinstance(x, str):
            return type(x) is type(y) and x == y
        if isinstance(x, (int, float)) and isinstance(y, (int, float)):
            return x == y
        if isinstance(x, list) and isinstance(y, list):
            return len(x) == len(y) and all(map(same, x, y))
        if isinstance(x, dict) and isinstance(y, dict):
            return x.keys() == y.keys() and all(same(x[k], y[k]) for k in x)
        return False

    return any(same(element, item) for element in array)


@criterion(9, "relation predicates are complementary and inclusion matches membership")
@settings(max_examples=1000, deadline=None)
@given(st.lists(_small_json, max_size=6), _small_json)
def test_c09_membership_oracle(array, item):
    assert json_includes(array, item) == _member(array, item)
    assert _holds("inclusion", array, item) == _member(array, item)


# 10 --------------------------------------------------------------------------------

THREE = [scenario("status-update"), scenario("repeat-login"), scenario("delete-then-get")]


def _three_iterations():
    return [r for s in THREE for r in iteration_responses([s])]


@criterion(10, "coverage never decreases and requests stay within budget")
def test_c10_three_iteration_session(petstore, clean_testbed):
    # coverage after each iteration: 3, 5 and 6 of 19 operations; 30% stops after the third
    report = scripted_session(petstore, clean_testbed, _three_iterations(), target_coverage=30.0)
    assert report.stop_reason == COVERAGE_TARGET
    trajectory = [p["coverage_percent"] for p in report.coverage_trajectory]
    assert trajectory == [round(n / 19 * 100, 2) for n in (3, 5, 6)]
    assert trajectory == sorted(trajectory)
    assert report.requests_spent == 4 + 3 + 4 <= SessionConfig().request_budget


@criterion(10, "coverage never decreases and requests stay within budget")
@pytest.mark.parametrize("budget", [1, 3, 4, 5, 8, 11, 12])
def test_c10_tight_budgets(petstore, clean_testbed, budget):
    report = scripted_session(petstore, clean_testbed, _three_iterations(), request_budget=budget)
    trajectory = [p["coverage_percent"] for p in report.coverage_trajectory]
    assert trajectory == sorted(trajectory)
    assert report.requests_spent <= budget
    assert sum(r.requests_spent for r in report.results()) == report.requests_spent


# 11 --------------------------------------------------------------------------------


@criterion(11, "repeat-login sequence is reported distinct against an empty baseline")
def test_c11_sequence_diff(petstore, clean_testbed, tmp_path, capsys):
    report = scripted_session(petstore, clean_testbed, iteration_responses([scenario("repeat-login")]))
    expected = parse_sequence("POST /user -> GET /user/login -> GET /user/login")
    assert report.sequences == {expected}
    assert diff_sequences(report.sequences, set()) == {expected}

    persist_session(report, tmp_path)
    empty = tmp_path / "baseline.json"
    empty.write_text("[]")
    assert main(["diff-seq", str(tmp_path / report.session_id / "report.json"), str(empty)]) == 0
    out = capsys.readouterr()
    assert out.out.splitlines() == ["POST /user -> GET /user/login -> GET /user/login"]
    assert "distinct: 1 of 1" in out.err


# 12 --------------------------------------------------------------------------------


@criterion(12, "persisted artifacts are byte-identical and replay reproduces the verdicts")
def test_c12_determinism_and_replay(petstore, faulty_testbed, tmp_path, capsys):
    tb = faulty_testbed("drop-status-update")
    report = scripted_session(petstore, tb, iteration_responses(canned_scenarios()))
    manifest = persist_session(report, tmp_path / "one")
    assert persist_session(report, tmp_path / "two") == manifest
    for name in manifest:
        first = (tmp_path / "one" / report.session_id / name).read_bytes()
        assert first == (tmp_path / "two" / report.session_id / name).read_bytes(), name

    session_dir = tmp_path / "one" / report.session_id
    rc = main(["replay", str(session_dir), "--spec", "petstore", "--base-url", tb.base_url,
               "--reset-url", tb.base_url + RESET_PATH])
    assert rc == 0
    capsys.readouterr()
    original = Counter(r.verdict for r in read_results(session_dir / "results.jsonl"))
    replayed = Counter(r.verdict for r in read_results(session_dir / "replay" / "results.jsonl"))
    assert replayed == original == Counter({PASSED: 4, "failed": 1})


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
