"""Run plans over HTTP, record per-step outcomes and classify failures."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Mapping
from urllib.parse import quote

import requests
from requests.structures import CaseInsensitiveDict

from .errors import AmbiguousMatch, ExtractionMiss
from .plan import EmtPlan, RequestStep, ValuePath, check_relation, extract_value, reference_name, substitute
from .specmodel import ApiSpecification, Operation, placeholders, resolve_operation

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0

OK = "ok"
HTTP_ERROR = "http-error"
TIMEOUT = "timeout"
TRANSPORT_ERROR = "transport-error"
EXTRACTION_MISS = "extraction-miss"
CONTRACT_ERROR = "contract-error"
UNDOCUMENTED_STATUS = "undocumented-status"
SKIPPED = "skipped"

PASSED = "passed"
FAILED = "failed"
FAILED_PLACEHOLDER = "failed-placeholder"

FAILURE_CLASSES = (
    "timeout",
    "transport",
    "server-crash",
    "request-contract",
    "undocumented-status",
    "response-contract",
    "relation-violation",
    "placeholder",
)


@dataclass(frozen=True, order=True)
class SequenceStep:
    method: str
    path: str
    resolved: bool = True

    def __str__(self) -> str:
        return f"{self.method} {self.path}" + ("" if self.resolved else " [unresolved]")


OpSequence = tuple[SequenceStep, ...]


def format_sequence(seq: OpSequence) -> str:
    return " -> ".join(str(s) for s in seq)


def sequence_to_list(seq: OpSequence) -> list[str]:
    return [str(s) for s in seq]


def parse_sequence(value: Any) -> OpSequence:
    """Accept ``["POST /user", "GET /user/login"]`` or ``"POST /user -> GET /user/login"``."""
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace("→", "->").split("->")]
    else:
        parts = [str(p).strip() for p in value]
    steps = []
    for part in parts:
        if not part:
            continue
        resolved = not part.endswith("[unresolved]")
        part = part.replace("[unresolved]", "").strip()
        method, _, path = part.partition(" ")
        steps.append(SequenceStep(method.upper(), path.strip(), resolved))
    return tuple(steps)


@dataclass(frozen=True)
class StepOutcome:
    step_index: int
    phase: str
    method: str
    path: str
    body_digest: str = ""
    status_code: int | None = None
    latency_ms: float = 0.0
    outcome: str = OK
    detail: str = ""
    expect_success: bool = True
    attempted: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "phase": self.phase,
            "request": {"method": self.method, "path": self.path, "body_digest": self.body_digest},
            "status_code": self.status_code,
            "latency_ms": self.latency_ms,
            "outcome": self.outcome,
            "detail": self.detail,
            "expect_success": self.expect_success,
            "attempted": self.attempted,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StepOutcome":
        req = d.get("request", {})
        return cls(
            d["step_index"], d["phase"], req.get("method", ""), req.get("path", ""), req.get("body_digest", ""),
            d.get("status_code"), d.get("latency_ms", 0.0), d.get("outcome", OK), d.get("detail", ""),
            d.get("expect_success", True), d.get("attempted", True),
        )


@dataclass(frozen=True)
class FailureClass:
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class ScenarioResult:
    hlmt_id: str
    verdict: str
    step_outcomes: tuple[StepOutcome, ...] = ()
    relation_verdicts: tuple[tuple[int, str, str], ...] = ()
    failure_class: FailureClass | None = None
    sequence: OpSequence = ()
    requests_spent: int = 0
    iteration_index: int = 1
    annotation: str | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == PASSED

    @property
    def placeholder(self) -> bool:
        return self.verdict == FAILED_PLACEHOLDER

    def to_dict(self) -> dict[str, Any]:
        return {
            "hlmt_id": self.hlmt_id,
            "iteration": self.iteration_index,
            "verdict": self.verdict,
            "step_outcomes": [o.to_dict() for o in self.step_outcomes],
            "relation_verdicts": [
                {"assertion": i, "verdict": v, "reason": r} for i, v, r in self.relation_verdicts
            ],
            "failure_class": (
                {"class": self.failure_class.kind, "detail": self.failure_class.detail} if self.failure_class else None
            ),
            "sequence": sequence_to_list(self.sequence),
            "requests_spent": self.requests_spent,
            "annotation": self.annotation,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioResult":
        fc = d.get("failure_class")
        return cls(
            hlmt_id=d["hlmt_id"],
            verdict=d["verdict"],
            step_outcomes=tuple(StepOutcome.from_dict(o) for o in d.get("step_outcomes", ())),
            relation_verdicts=tuple((r["assertion"], r["verdict"], r.get("reason", "")) for r in d.get("relation_verdicts", ())),
            failure_class=FailureClass(fc["class"], fc.get("detail", "")) if fc else None,
            sequence=parse_sequence(d.get("sequence", ())),
            requests_spent=d.get("requests_spent", 0),
            iteration_index=d.get("iteration", 1),
            annotation=d.get("annotation"),
        )


def _digest(body: Any) -> str:
    if body is None:
        return ""
    data = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    return hashlib.sha256(data).hexdigest()[:16]


def is_datetime(text: str) -> bool:
    """RFC 3339 / ISO 8601 date-time check used for headers declared ``format: date-time``."""
    value = text.strip()
    if "T" not in value and " " not in value:
        return False
    if value.endswith(("Z", "z")):
        value = value[:-1] + "+00:00"
    try:
        datetime.fromisoformat(value)
    except ValueError:
        return False
    return True


def _query_value(v: Any) -> Any:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return [_query_value(x) for x in v]
    if v is None:
        return ""
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


class _StepFailure(Exception):
    def __init__(self, outcome: str, detail: str):
        super().__init__(detail)
        self.outcome = outcome
        self.detail = detail


@dataclass
class Executor:
    """Sequential plan runner bound to one spec, base URL and static header set."""

    spec: ApiSpecification
    base_url: str
    per_request_timeout: float = DEFAULT_TIMEOUT
    static_headers: Mapping[str, str] = field(default_factory=dict)
    session: requests.Session = field(default_factory=requests.Session)

    def execute(self, plan: EmtPlan, budget_remaining: int, iteration_index: int = 1) -> ScenarioResult:
        if plan.placeholder:
            return ScenarioResult(
                hlmt_id=plan.hlmt_id,
                verdict=FAILED_PLACEHOLDER,
                failure_class=FailureClass("placeholder", "no executable plan could be produced"),
                iteration_index=iteration_index,
            )

        bindings: dict[str, Any] = {}
        outcomes: list[StepOutcome] = []
        spent = 0
        aborted = False
        for index, (phase, step) in enumerate(plan.steps):
            if aborted:
                outcomes.append(StepOutcome(index, phase, step.method, step.path_template, outcome=SKIPPED,
                                            expect_success=step.expect_success, attempted=False))
                continue
            if spent >= budget_remaining:
                outcomes.append(StepOutcome(index, phase, step.method, step.path_template, outcome=TRANSPORT_ERROR,
                                            detail="budget exhausted", expect_success=step.expect_success,
                                            attempted=False))
                aborted = True
                continue
            outcome = self._run_step(index, phase, step, bindings)
            if outcome.attempted:
                spent += 1
            outcomes.append(outcome)
            if outcome.outcome != OK:
                aborted = True

        relation_verdicts: list[tuple[int, str, str]] = []
        if not aborted:
            for i, assertion in enumerate(plan.assertions):
                try:
                    left = bindings[reference_name(assertion.left) or ""]
                    right = substitute(assertion.right, bindings)
                except KeyError as exc:
                    relation_verdicts.append((i, "violated", f"unbound operand {exc.args[0]!r}"))
                    continue
                res = check_relation(assertion, left, right)
                relation_verdicts.append((i, res.verdict, res.reason))

        passed = not aborted and all(v == "holds" for _, v, _ in relation_verdicts)
        result = ScenarioResult(
            hlmt_id=plan.hlmt_id,
            verdict=PASSED if passed else FAILED,
            step_outcomes=tuple(outcomes),
            relation_verdicts=tuple(relation_verdicts),
            requests_spent=spent,
            iteration_index=iteration_index,
        )
        result = _with(result, sequence=extract_sequence(result, self.spec))
        if not passed:
            result = _with(result, failure_class=classify_failure(result, self.spec))
        return result

    # -- one request --------------------------------------------------------

    def _resolve_request(self, step: RequestStep, bindings: Mapping[str, Any]):
        path = step.path_template
        args = substitute(dict(step.path_args), bindings)
        for name in placeholders(path):
            value = args[name]
            text = value if isinstance(value, str) else json.dumps(value)
            path = path.replace("{" + name + "}", quote(text, safe=""))
        query = {k: _query_value(v) for k, v in substitute(dict(step.query), bindings).items()}
        headers = {k: str(v) for k, v in substitute(dict(step.headers), bindings).items()}
        body = substitute(step.body, bindings)
        return path, query, headers, body

    def _operation(self, method: str, path: str) -> Operation | None:
        try:
            return resolve_operation(self.spec, method, path)
        except AmbiguousMatch as exc:
            return exc.candidates[0]

    def _run_step(self, index: int, phase: str, step: RequestStep, bindings: dict[str, Any]) -> StepOutcome:
        base = dict(phase=phase, method=step.method, expect_success=step.expect_success)
        try:
            path, query, headers, body = self._resolve_request(step, bindings)
        except KeyError as exc:
            return StepOutcome(index, path=step.path_template, outcome=EXTRACTION_MISS,
                               detail=f"unbound reference {exc.args[0]!r}", attempted=False, **base)

        op = self._operation(step.method, path)
        if op is not None and op.declares_form_data and isinstance(body, Mapping) and op.request_body_schema is None:
            # form-data operations take their fields on the query string
            query = {**{k: _query_value(v) for k, v in body.items()}, **query}
            body = None

        url = self.base_url.rstrip("/") + path
        sent_path = path
        digest = _digest(body)
        start = time.perf_counter()
        try:
            resp = self.session.request(
                step.method,
                url,
                params=query or None,
                json=body,
                headers={**self.static_headers, **headers},
                timeout=self.per_request_timeout,
                allow_redirects=False,
            )
        except requests.Timeout:
            latency = round((time.perf_counter() - start) * 1000, 3)
            return StepOutcome(index, path=sent_path, body_digest=digest, latency_ms=latency, outcome=TIMEOUT,
                               detail=f"no response within {self.per_request_timeout:g} s", **base)
        except requests.RequestException as exc:
            latency = round((time.perf_counter() - start) * 1000, 3)
            return StepOutcome(index, path=sent_path, body_digest=digest, latency_ms=latency,
                               outcome=TRANSPORT_ERROR, detail=str(exc), **base)
        latency = round((time.perf_counter() - start) * 1000, 3)

        status = resp.status_code
        common = dict(path=sent_path, body_digest=digest, status_code=status, latency_ms=latency, **base)
        try:
            self._check_response(step, op, resp)
            for name, raw_path in step.extract.items():
                bindings[name] = self._extract(resp, ValuePath.parse(raw_path))
        except _StepFailure as failure:
            return StepOutcome(index, outcome=failure.outcome, detail=failure.detail, **common)
        return StepOutcome(index, outcome=OK, **common)

    def _check_response(self, step: RequestStep, op: Operation | None, resp: requests.Response) -> None:
        status = resp.status_code
        if status >= 500 or (step.expect_success and not 200 <= status < 300):
            raise _StepFailure(HTTP_ERROR, f"HTTP {status}: {resp.text[:200]}")
        if op is None:
            return
        if not op.documents_status(status):
            documented = ", ".join(sorted(op.documented_responses)) or "none"
            raise _StepFailure(UNDOCUMENTED_STATUS, f"HTTP {status} is not documented for {op} (documented: {documented})")
        documented = op.response_for(status)
        if documented is None:
            return
        for header in documented.headers:
            if documented.header_format(header) != "date-time":
                continue
            value = resp.headers.get(header)
            if value is not None and not is_datetime(value):
                raise _StepFailure(CONTRACT_ERROR, f"header {header} is not a valid date-time: {value!r}")

    def _extract(self, resp: requests.Response, path: ValuePath) -> Any:
        if path.root == "@status":
            return resp.status_code
        try:
            if path.root == "@headers":
                return extract_value(CaseInsensitiveDict(resp.headers), path)
            try:
                body = resp.json()
            except ValueError:
                raise _StepFailure(CONTRACT_ERROR, f"response body is not JSON (needed for {path})") from None
            return extract_value(body, path)
        except ExtractionMiss as miss:
            raise _StepFailure(EXTRACTION_MISS, str(miss)) from None


def _with(result: ScenarioResult, **changes) -> ScenarioResult:
    return replace(result, **changes)


def execute_scenario(
    plan: EmtPlan,
    base_url: str,
    budget_remaining: int,
    per_request_timeout: float = DEFAULT_TIMEOUT,
    *,
    spec: ApiSpecification,
    static_headers: Mapping[str, str] | None = None,
    iteration_index: int = 1,
) -> ScenarioResult:
    executor = Executor(spec, base_url, per_request_timeout, dict(static_headers or {}))
    return executor.execute(plan, budget_remaining, iteration_index)


def classify_failure(result: ScenarioResult, spec: ApiSpecification | None = None) -> FailureClass:
    """Root-cause class, first match wins:
    timeout > transport > server-crash > request-contract > undocumented-status
    > response-contract > relation-violation."""
    if result.placeholder:
        return FailureClass("placeholder", "no executable plan could be produced")
    bad = [o for o in result.step_outcomes if o.outcome not in (OK, SKIPPED)]

    def first(pred):
        return next((o for o in bad if pred(o)), None)

    if o := first(lambda o: o.outcome == TIMEOUT):
        return FailureClass("timeout", f"{o.method} {o.path}: {o.detail}")
    if o := first(lambda o: o.outcome == TRANSPORT_ERROR):
        return FailureClass("transport", f"{o.method} {o.path}: {o.detail}")
    if o := first(lambda o: o.status_code is not None and o.status_code >= 500):
        return FailureClass("server-crash", f"{o.method} {o.path} returned {o.status_code}")
    if o := first(lambda o: o.outcome == HTTP_ERROR and o.status_code is not None and 400 <= o.status_code < 500):
        return FailureClass("request-contract", f"{o.method} {o.path} returned {o.status_code}")
    if o := first(lambda o: o.outcome == UNDOCUMENTED_STATUS):
        return FailureClass("undocumented-status", o.detail)
    if o := first(lambda o: o.outcome in (EXTRACTION_MISS, CONTRACT_ERROR, HTTP_ERROR)):
        return FailureClass("response-contract", f"{o.method} {o.path}: {o.detail}")
    violated = [(i, r) for i, v, r in result.relation_verdicts if v != "holds"]
    if violated:
        i, reason = violated[0]
        return FailureClass("relation-violation", f"assertion {i}: {reason}")
    return FailureClass("relation-violation", "scenario failed without a recorded cause")


def extract_sequence(result: ScenarioResult, spec: ApiSpecification) -> OpSequence:
    """Normalized (method, template) list of the requests a scenario actually issued."""
    steps = []
    for o in result.step_outcomes:
        if not o.attempted:
            continue
        try:
            op = resolve_operation(spec, o.method, o.path)
        except AmbiguousMatch as exc:
            op = exc.candidates[0]
        if op is None:
            steps.append(SequenceStep(o.method, o.path.split("?", 1)[0], resolved=False))
        else:
            steps.append(SequenceStep(op.http_method, op.path_template))
    return tuple(steps)
