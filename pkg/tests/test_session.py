from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restmeta.errors import FatalConfigError
from restmeta.llm import ScriptedClient
from restmeta.session import (
    COVERAGE_TARGET,
    NO_NEW_TESTS,
    PLATEAU,
    REQUEST_BUDGET,
    TIME_BUDGET,
    SessionConfig,
    SessionState,
    account_progress,
    parse_duration,
    run_session,
    should_stop,
)
from restmeta.testbed import canned_scenarios, iteration_responses, scenario


def test_defaults():
    c = SessionConfig()
    assert (c.target_coverage, c.plateau_window, c.request_budget, c.time_budget) == (100.0, 5, 1000, 1800.0)
    assert (c.batch_bound, c.repair_max_attempts) == (5, 2)
    assert c.validate() is c


@pytest.mark.parametrize(
    "value, seconds",
    [(1800, 1800.0), ("30m", 1800.0), ("0.5h", 1800.0), ("1800s", 1800.0), (" 2 min ", 120.0), (1.5, 1.5)],
)
def test_parse_duration(value, seconds):
    assert parse_duration(value) == seconds


@pytest.mark.parametrize("value", ["soon", "30 days", "", True])
def test_parse_duration_rejects(value):
    with pytest.raises(FatalConfigError):
        parse_duration(value)


def test_from_dict():
    c = SessionConfig.from_dict({"time_budget": "10m", "request_budget": 50,
                                 "agent_configs": {"test_generator": {"model_id": "m", "temperature": 0.3}}})
    assert c.time_budget == 600 and c.request_budget == 50
    assert c.agent_configs["test_generator"].temperature == 0.3
    assert c.agent_configs["mr_generator"].temperature == 0
    assert SessionConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()


@pytest.mark.parametrize(
    "data",
    [
        {"request_budget": -1},
        {"request_budget": 0},
        {"plateau_window": 2.5},
        {"batch_bound": True},
        {"target_coverage": 120},
        {"repair_max_attempts": -1},
        {"time_budget": 0},
        {"per_request_timeout": 0},
        {"budget": 10},
        {"agent_configs": {"critic": {}}},
        {"agent_configs": {"mr_generator": {"colour": "blue"}}},
    ],
)
def test_from_dict_rejects(data):
    with pytest.raises(FatalConfigError):
        SessionConfig.from_dict(data)


# -- stopping rules --------------------------------------------------------------


def state(**kw):
    s = SessionState(total_operations=kw.pop("total", 10), started_at=0.0)
    for k, v in kw.items():
        setattr(s, k, v)
    return s


def test_stop_thresholds_at_defaults():
    c = SessionConfig()
    assert not should_stop(state(requests_spent=999), c, 0)
    assert should_stop(state(requests_spent=1000), c, 0).reason == REQUEST_BUDGET
    assert not should_stop(state(), c, 1799.9)
    assert should_stop(state(), c, 1800).reason == TIME_BUDGET
    assert not should_stop(state(plateau_counter=4), c, 0)
    assert should_stop(state(plateau_counter=5), c, 0).reason == PLATEAU
    nine = frozenset(("GET", f"/p{i}") for i in range(9))
    assert not should_stop(state(covered_operations=nine), c, 0)
    assert should_stop(state(covered_operations=nine | {("GET", "/x")}), c, 0).reason == COVERAGE_TARGET


@settings(max_examples=300, deadline=None)
@given(st.booleans(), st.booleans(), st.booleans(), st.booleans())
def test_stop_priority(time_up, requests_up, covered, plateau):
    c = SessionConfig()
    s = state(
        total=1,
        requests_spent=1000 if requests_up else 0,
        covered_operations=frozenset({("GET", "/a")}) if covered else frozenset(),
        plateau_counter=5 if plateau else 0,
    )
    fired = [r for r, on in [(TIME_BUDGET, time_up), (REQUEST_BUDGET, requests_up),
                             (COVERAGE_TARGET, covered), (PLATEAU, plateau)] if on]
    decision = should_stop(s, c, 1800 if time_up else 0)
    assert decision.reason == (fired[0] if fired else None)
    assert bool(decision) == bool(fired)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.sampled_from([0.0, 0.0, 5.0])), max_size=20))
def test_plateau_counter_matches_oracle(history):
    s = state()
    run = 0
    for new_slugs, gain in history:
        s = account_progress(s, new_slugs, gain)
        run = 0 if (new_slugs or gain) else run + 1
        assert s.plateau_counter == run


# -- whole sessions against the testbed -------------------------------------------

FAST = [s for s in canned_scenarios()]


def oracle_coverage(scenarios, total):
    # operations named by the plans, all of which resolve against the document
    ops = set()
    for s in scenarios:
        for _, step in s.plan.steps:
            ops.add((step.method, step.path_template))
    return len(ops) / total * 100


def session(spec, tb, responses, **config):
    client = ScriptedClient(responses)
    cfg = SessionConfig(**config)
    report = run_session(spec, tb.base_url, cfg, client, session_id="t", before_scenario=lambda p: tb.reset())
    return report, client


def test_one_iteration_then_no_new_tests(petstore, clean_testbed):
    report, client = session(petstore, clean_testbed, iteration_responses(FAST))
    assert report.stop_reason == NO_NEW_TESTS
    first = report.iterations[0]
    assert first.metrics.hlmt_count == 5 and first.metrics.emt_count == 5
    assert first.metrics.passed == 5 and first.metrics.failed == 0
    assert [s.metrics.hlmt_count for s in report.iterations[1:]] == [0]
    assert report.requests_spent == 16
    assert report.totals.coverage_percent == pytest.approx(oracle_coverage(FAST, 19))
    assert len(report.semantic_groups) == 5


def test_coverage_target_stop(petstore, clean_testbed):
    responses = iteration_responses(FAST) + iteration_responses(FAST)
    report, client = session(petstore, clean_testbed, responses, target_coverage=30.0)
    assert report.stop_reason == COVERAGE_TARGET
    assert len(report.iterations) == 1
    assert client.remaining == len(responses) // 2


def test_plateau_stop(petstore, clean_testbed):
    one = [scenario("status-update")]
    responses = list(itertools.chain.from_iterable(iteration_responses(one) for _ in range(8)))
    report, client = session(petstore, clean_testbed, responses)
    assert report.stop_reason == PLATEAU
    # iteration 1 makes progress, iterations 2..6 are stale
    assert len(report.iterations) == 6
    assert [s.plateau_counter for s in report.iterations] == [0, 1, 2, 3, 4, 5]
    assert [s.new_slugs for s in report.iterations] == [1, 0, 0, 0, 0, 0]
    # the generator is shown everything produced so far
    title = scenario("status-update").hlmt.scenario_title
    prompts = [p for tag, p in client.calls if tag == "mr_generate"]
    assert title not in prompts[0] and title in prompts[1]


def test_request_budget_stop(petstore, clean_testbed):
    one = [scenario("status-update")]
    responses = iteration_responses(one) * 3
    report, _ = session(petstore, clean_testbed, responses, request_budget=5)
    assert report.stop_reason == REQUEST_BUDGET
    assert report.requests_spent == 5
    last = report.scenarios[-1][0].result
    assert last.step_outcomes[1].detail == "budget exhausted"


def test_time_budget_with_simulated_clock(petstore, clean_testbed):
    ticks = itertools.count(0, 1000)
    report = run_session(
        petstore, clean_testbed.base_url, SessionConfig(), ScriptedClient(iteration_responses(FAST) * 2),
        session_id="t", before_scenario=lambda p: clean_testbed.reset(), clock=lambda: float(next(ticks)),
    )
    assert report.stop_reason == TIME_BUDGET
    assert len(report.iterations) == 1


def test_role_factory(petstore, clean_testbed):
    script = iteration_responses([scenario("status-update")])
    by_role = {
        "mr_generator": ScriptedClient(script[:1]),
        "mr_refiner": ScriptedClient(script[1:2]),
        "test_generator": ScriptedClient(script[2:]),
    }
    report = run_session(petstore, clean_testbed.base_url, SessionConfig(), by_role.__getitem__, session_id="t")
    assert report.iterations[0].metrics.passed == 1
    assert all(c.remaining == 0 for c in by_role.values())


def test_rejects_empty_spec(petstore):
    from dataclasses import replace

    with pytest.raises(FatalConfigError):
        run_session(replace(petstore, operations=()), "http://x", SessionConfig(), ScriptedClient([]))
