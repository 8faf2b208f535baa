from __future__ import annotations

import json

import pytest
import requests

from restmeta.executor import (
    EXTRACTION_MISS,
    FAILED,
    FAILED_PLACEHOLDER,
    HTTP_ERROR,
    OK,
    PASSED,
    SKIPPED,
    TIMEOUT,
    TRANSPORT_ERROR,
    UNDOCUMENTED_STATUS,
    Executor,
    ScenarioResult,
    SequenceStep,
    StepOutcome,
    classify_failure,
    execute_scenario,
    format_sequence,
    is_datetime,
    parse_sequence,
)
from restmeta.mtmodel import Hlmt
from restmeta.plan import EmtPlan, make_placeholder
from restmeta.testbed import scenario

WORKED = scenario("status-update")


def plan(given, when, assertions=None):
    return EmtPlan.from_dict(
        {
            "hlmt_id": "T1",
            "labels": {"given": "g", "when": "w", "then": "t"},
            "given_steps": given,
            "when_steps": when,
            "assertions": assertions or [],
        }
    )


CREATE = {"method": "POST", "path": "/pet", "body": {"name": "a", "photoUrls": []}, "extract": {"pid": "id"}}


def test_worked_example_passes(petstore, clean_testbed):
    result = execute_scenario(WORKED.plan, clean_testbed.base_url, 1000, spec=petstore)
    assert result.verdict == PASSED and result.failure_class is None
    assert result.requests_spent == 4
    assert [o.outcome for o in result.step_outcomes] == [OK] * 4
    assert [o.phase for o in result.step_outcomes] == ["given", "given", "when", "when"]
    assert result.step_outcomes[2].path == "/pet/1"
    assert format_sequence(result.sequence) == "POST /pet -> GET /pet/{petId} -> POST /pet/{petId} -> GET /pet/{petId}"
    assert [v for _, v, _ in result.relation_verdicts] == ["holds", "holds"]


def test_placeholder_issues_nothing(petstore):
    ex = Executor(petstore, "http://127.0.0.1:9")
    result = ex.execute(make_placeholder(Hlmt("X", "s", "g", "w", "t")), 10)
    assert result.verdict == FAILED_PLACEHOLDER
    assert result.requests_spent == 0 and result.step_outcomes == ()
    assert result.failure_class.kind == "placeholder"


def test_budget_exhaustion_stops_traffic(petstore, clean_testbed):
    result = Executor(petstore, clean_testbed.base_url).execute(WORKED.plan, 2)
    assert result.requests_spent == 2
    outcomes = [(o.outcome, o.attempted) for o in result.step_outcomes]
    assert outcomes == [(OK, True), (OK, True), (TRANSPORT_ERROR, False), (SKIPPED, False)]
    assert result.step_outcomes[2].detail == "budget exhausted"
    assert result.failure_class.kind == "transport"
    assert len(result.sequence) == 2


def test_abort_then_skip(petstore, clean_testbed):
    p = plan(
        [{"method": "GET", "path": "/pet/{petId}", "path_args": {"petId": 404}}],
        [{"method": "GET", "path": "/pet/1"}, {"method": "GET", "path": "/pet/2"}],
        [{"kind": "equality", "left": "${x}", "right": 1}],
    )
    result = Executor(petstore, clean_testbed.base_url).execute(p, 100)
    assert result.verdict == FAILED
    assert [o.outcome for o in result.step_outcomes] == [HTTP_ERROR, SKIPPED, SKIPPED]
    assert result.requests_spent == 1
    assert result.relation_verdicts == ()
    assert result.failure_class.kind == "request-contract"
    assert len(result.sequence) == 1


def test_expected_failure_status_is_ok(petstore, clean_testbed):
    p = plan(
        [CREATE],
        [{"method": "GET", "path": "/pet/999", "expect_success": False, "extract": {"code": "@status", "msg": "message"}}],
        [{"kind": "equality", "left": "${code}", "right": 404}, {"kind": "inclusion", "left": "${msg}", "right": "not found"}],
    )
    result = Executor(petstore, clean_testbed.base_url).execute(p, 100)
    assert result.passed, result.relation_verdicts


def test_undocumented_status(petstore, clean_testbed):
    # the testbed has no inventory route; GET /store/inventory documents only 200
    p = plan([CREATE], [{"method": "GET", "path": "/store/inventory", "expect_success": False}])
    result = Executor(petstore, clean_testbed.base_url).execute(p, 100)
    assert result.step_outcomes[-1].outcome == UNDOCUMENTED_STATUS
    assert result.failure_class.kind == "undocumented-status"


def test_extraction_miss_is_response_contract(petstore, clean_testbed):
    p = plan([CREATE], [{"method": "GET", "path": "/pet/{petId}", "path_args": {"petId": "${pid}"},
                         "extract": {"x": "owner/name"}}])
    result = Executor(petstore, clean_testbed.base_url).execute(p, 100)
    assert result.step_outcomes[-1].outcome == EXTRACTION_MISS
    assert result.failure_class.kind == "response-contract"


def test_unbound_reference_sends_nothing(petstore, clean_testbed):
    p = plan([{"method": "GET", "path": "/pet/{petId}", "path_args": {"petId": "${ghost}"}}], [CREATE])
    result = Executor(petstore, clean_testbed.base_url).execute(p, 100)
    first = result.step_outcomes[0]
    assert first.outcome == EXTRACTION_MISS and not first.attempted
    assert result.requests_spent == 0 and result.sequence == ()


def test_connection_refused_is_transport(petstore):
    result = Executor(petstore, "http://127.0.0.1:9").execute(WORKED.plan, 100)
    assert result.step_outcomes[0].outcome == TRANSPORT_ERROR
    assert result.requests_spent == 1
    assert result.failure_class.kind == "transport"


def test_relation_violation_detail(petstore, faulty_testbed):
    tb = faulty_testbed("drop-status-update")
    result = Executor(petstore, tb.base_url).execute(WORKED.plan, 100)
    assert result.failure_class.kind == "relation-violation"
    assert result.failure_class.detail.startswith("assertion 1")
    assert [v for _, v, _ in result.relation_verdicts] == ["holds", "violated"]


# -- fake transport for edge cases ---------------------------------------------


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def request(self, method, url, **kwargs):
        self.calls.append((method, url, kwargs))
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        status, body, headers = item
        resp = requests.Response()
        resp.status_code = status
        resp._content = body if isinstance(body, bytes) else json.dumps(body).encode()
        resp.headers.update(headers)
        return resp


def fake_executor(spec, *responses, **kw):
    session = FakeSession(responses)
    return Executor(spec, "http://sut/", session=session, **kw), session


def test_request_shape(petstore):
    ex, session = fake_executor(petstore, (200, {"id": 5}, {}), (200, {}, {}), static_headers={"X-Key": "k"})
    p = plan(
        [CREATE],
        [{"method": "POST", "path": "/pet/{petId}", "path_args": {"petId": "${pid}"},
          "query": {"status": "sold", "flag": True}, "headers": {"X-Trace": "${pid}"}}],
    )
    ex.execute(p, 10)
    method, url, kw = session.calls[1]
    assert (method, url) == ("POST", "http://sut/pet/5")
    assert kw["params"] == {"status": "sold", "flag": "true"}
    assert kw["headers"] == {"X-Key": "k", "X-Trace": "5"}
    assert kw["timeout"] == 10 and kw["allow_redirects"] is False
    assert session.calls[0][2]["json"] == {"name": "a", "photoUrls": []}


def test_form_data_fields_move_to_query(usermanagement):
    ex, session = fake_executor(usermanagement, (202, b"", {}), (200, [], {}))
    p = plan(
        [{"method": "POST", "path": "/api/auth/password/forgot", "body": {"email": "a@b.c"}}],
        [{"method": "GET", "path": "/api/users"}],
    )
    result = ex.execute(p, 10)
    assert result.passed
    kw = session.calls[0][2]
    assert kw["json"] is None and kw["params"] == {"email": "a@b.c"}


def test_timeout_outcome(petstore):
    ex, _ = fake_executor(petstore, requests.ReadTimeout("slow"))
    result = ex.execute(WORKED.plan, 10)
    assert result.step_outcomes[0].outcome == TIMEOUT and result.step_outcomes[0].attempted
    assert result.failure_class.kind == "timeout"


def test_bad_date_header_and_non_json_body(petstore):
    login = {"method": "GET", "path": "/user/login", "extract": {"limit": "@headers/x-rate-limit"}}
    ex, _ = fake_executor(petstore, (200, b"ok", {"X-Expires-After": "tomorrow", "X-Rate-Limit": "1"}))
    result = ex.execute(plan([login], [login]), 10)
    assert "not a valid date-time" in result.step_outcomes[0].detail
    assert result.failure_class.kind == "response-contract"

    ex, _ = fake_executor(petstore, (200, b"<html>", {}))
    result = ex.execute(plan([CREATE], [CREATE]), 10)
    assert "not JSON" in result.step_outcomes[0].detail
    assert result.failure_class.kind == "response-contract"


def test_server_error_with_expect_success_false_still_fails(petstore):
    ex, _ = fake_executor(petstore, (500, {}, {}))
    p = plan([{"method": "GET", "path": "/pet/1", "expect_success": False}], [CREATE])
    result = ex.execute(p, 10)
    assert result.failure_class.kind == "server-crash"


def test_unresolved_paths_are_flagged(petstore):
    ex, _ = fake_executor(petstore, (200, {}, {}), (200, {}, {}))
    result = ex.execute(plan([{"method": "GET", "path": "/pet/1"}], [{"method": "GET", "path": "/kennel/1"}]), 10)
    assert result.sequence == (SequenceStep("GET", "/pet/{petId}"), SequenceStep("GET", "/kennel/1", resolved=False))


# -- classification ------------------------------------------------------------


def outcome(i, status, kind, method="GET", path="/pet/1"):
    return StepOutcome(i, "given", method, path, status_code=status, outcome=kind)


@pytest.mark.parametrize(
    "outcomes, expected",
    [
        ([outcome(0, 500, HTTP_ERROR), outcome(1, None, TIMEOUT)], "timeout"),
        ([outcome(0, 400, HTTP_ERROR), outcome(1, 503, HTTP_ERROR)], "server-crash"),
        ([outcome(0, 200, UNDOCUMENTED_STATUS), outcome(1, 404, HTTP_ERROR)], "request-contract"),
        ([outcome(0, 200, EXTRACTION_MISS), outcome(1, 299, UNDOCUMENTED_STATUS)], "undocumented-status"),
        ([outcome(0, 200, EXTRACTION_MISS)], "response-contract"),
        ([outcome(0, None, TRANSPORT_ERROR), outcome(1, 500, HTTP_ERROR)], "transport"),
    ],
)
def test_classification_precedence(outcomes, expected):
    result = ScenarioResult("X", FAILED, tuple(outcomes))
    assert classify_failure(result).kind == expected


def test_relation_violation_class():
    result = ScenarioResult("X", FAILED, (outcome(0, 200, OK),), ((0, "holds", ""), (1, "violated", "a != b")))
    fc = classify_failure(result)
    assert fc.kind == "relation-violation" and "a != b" in fc.detail


def test_result_round_trip(petstore, clean_testbed):
    result = Executor(petstore, clean_testbed.base_url).execute(WORKED.plan, 100)
    again = ScenarioResult.from_dict(json.loads(json.dumps(result.to_dict())))
    assert again == result


def test_sequence_parsing():
    seq = parse_sequence("POST /pet -> GET /pet/{petId}")
    assert seq == parse_sequence(["POST /pet", "GET /pet/{petId}"])
    assert format_sequence(seq) == "POST /pet -> GET /pet/{petId}"
    assert parse_sequence([]) == ()


@pytest.mark.parametrize(
    "text, ok",
    [
        ("2026-10-19T12:00:00Z", True),
        ("2026-10-19T12:00:00.123+02:00", True),
        ("2026-10-19 12:00:00", True),
        ("2026-10-19", False),
        ("Mon Oct 19 12:00:00 UTC 2026", False),
        ("", False),
    ],
)
def test_is_datetime(text, ok):
    assert is_datetime(text) is ok
