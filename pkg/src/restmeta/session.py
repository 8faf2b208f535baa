"""The session driver: iterate generate -> refine -> lower -> execute until a
stopping criterion fires."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .agents import PromptContext, generate_hlmts, lower_hlmt, refine_hlmts
from .errors import FatalConfigError, LlmTransportError, NoArrayFound
from .executor import DEFAULT_TIMEOUT, Executor, ScenarioResult
from .llm import ROLES, AgentConfig, LlmClient, default_agent_configs
from .mtmodel import Diagnostic, Hlmt, validate_hlmt
from .plan import EmtPlan
from .specmodel import ApiSpecification, list_operations

log = logging.getLogger(__name__)

TIME_BUDGET = "time-budget"
REQUEST_BUDGET = "request-budget"
COVERAGE_TARGET = "coverage-target"
PLATEAU = "plateau"
NO_NEW_TESTS = "no-new-tests"

# An iteration counts toward the plateau only when it yields no new semantic
# slug AND no coverage gain.
PLATEAU_RULE = "no-new-slug AND no-coverage-gain"


def parse_duration(value: Any) -> float:
    """Seconds from ``1800``, ``"1800s"``, ``"30m"``, ``"0.5h"``."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(s|sec|m|min|h)?\s*", str(value))
    if not m:
        raise FatalConfigError(f"cannot read duration {value!r}")
    scale = {None: 1, "s": 1, "sec": 1, "m": 60, "min": 60, "h": 3600}[m.group(2)]
    return float(m.group(1)) * scale


@dataclass
class SessionConfig:
    target_coverage: float = 100.0
    plateau_window: int = 5
    request_budget: int = 1000
    time_budget: float = 30 * 60.0
    batch_bound: int = 5
    repair_max_attempts: int = 2
    per_request_timeout: float = DEFAULT_TIMEOUT
    agent_configs: dict[str, AgentConfig] = field(default_factory=default_agent_configs)

    def validate(self) -> "SessionConfig":
        if not 0 <= self.target_coverage <= 100:
            raise FatalConfigError("target_coverage must be within [0, 100]")
        for name in ("plateau_window", "request_budget", "batch_bound"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise FatalConfigError(f"{name} must be a positive integer, got {value!r}")
        if isinstance(self.repair_max_attempts, bool) or not isinstance(self.repair_max_attempts, int) \
                or self.repair_max_attempts < 0:
            raise FatalConfigError("repair_max_attempts must be a non-negative integer")
        if self.time_budget <= 0:
            raise FatalConfigError("time_budget must be positive")
        if self.per_request_timeout <= 0:
            raise FatalConfigError("per_request_timeout must be positive")
        for role in self.agent_configs:
            if role not in ROLES:
                raise FatalConfigError(f"unknown agent role {role!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_coverage": self.target_coverage,
            "plateau_window": self.plateau_window,
            "request_budget": self.request_budget,
            "time_budget": self.time_budget,
            "batch_bound": self.batch_bound,
            "repair_max_attempts": self.repair_max_attempts,
            "per_request_timeout": self.per_request_timeout,
            "agent_configs": {
                role: {
                    "model_id": c.model_id,
                    "temperature": c.temperature,
                    "seed": c.seed,
                    "max_output_tokens": c.max_output_tokens,
                }
                for role, c in sorted(self.agent_configs.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SessionConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise FatalConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if "time_budget" in kwargs:
            kwargs["time_budget"] = parse_duration(kwargs["time_budget"])
        if "agent_configs" in kwargs:
            agents = default_agent_configs()
            for role, raw in (kwargs["agent_configs"] or {}).items():
                try:
                    agents[role] = AgentConfig(role, **raw)
                except TypeError as exc:
                    raise FatalConfigError(f"agent_configs.{role}: {exc}") from None
            kwargs["agent_configs"] = agents
        try:
            return cls(**kwargs).validate()
        except TypeError as exc:
            raise FatalConfigError(str(exc)) from None


@dataclass
class IterationRecord:
    index: int
    hlmts: list[Hlmt]
    plans: list[EmtPlan]
    results: list[ScenarioResult]
    diagnostics: list[Diagnostic]
    new_slugs: int
    coverage_percent: float
    covered: frozenset[tuple[str, str]]
    elapsed: float
    plateau_counter: int
    repair_attempts: int = 0


@dataclass
class SessionState:
    total_operations: int
    started_at: float
    iteration_index: int = 0
    all_hlmts: list[Hlmt] = field(default_factory=list)
    covered_operations: frozenset[tuple[str, str]] = frozenset()
    requests_spent: int = 0
    plateau_counter: int = 0
    iteration_summaries: list[IterationRecord] = field(default_factory=list)

    @property
    def coverage_percent(self) -> float:
        if not self.total_operations:
            return 0.0
        return len(self.covered_operations) / self.total_operations * 100.0

    @property
    def slugs(self) -> set[str]:
        return {h.semantic_slug for h in self.all_hlmts}


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.stop


CONTINUE = StopDecision(False)


def should_stop(state: SessionState, config: SessionConfig, now: float) -> StopDecision:
    """Fixed priority: time budget, request budget, coverage target, plateau."""
    if now - state.started_at >= config.time_budget:
        return StopDecision(True, TIME_BUDGET)
    if state.requests_spent >= config.request_budget:
        return StopDecision(True, REQUEST_BUDGET)
    if state.total_operations and state.coverage_percent >= config.target_coverage:
        return StopDecision(True, COVERAGE_TARGET)
    if state.plateau_counter >= config.plateau_window:
        return StopDecision(True, PLATEAU)
    return CONTINUE


def update_coverage(state: SessionState, results: Iterable[ScenarioResult], spec: ApiSpecification) -> SessionState:
    known = {op.key for op in spec.operations}
    covered = set(state.covered_operations)
    for result in results:
        for step in result.sequence:
            key = (step.method, step.path)
            if step.resolved and key in known:
                covered.add(key)
    return replace(state, covered_operations=frozenset(covered))


def account_progress(state: SessionState, new_slugs: int, coverage_gain: float) -> SessionState:
    progressed = new_slugs > 0 or coverage_gain > 0
    return replace(state, plateau_counter=0 if progressed else state.plateau_counter + 1)


def uncovered_operations(state: SessionState, spec: ApiSpecification) -> list[tuple[str, str]]:
    return [op.key for op in list_operations(spec) if op.key not in state.covered_operations]


ClientSource = LlmClient | Callable[[str], LlmClient]


class _RoutedClient(LlmClient):
    """Routes each call to the client built for the calling agent's role."""

    def __init__(self, factory: Callable[[str], LlmClient]):
        self.factory = factory
        self.clients: dict[str, LlmClient] = {}

    def complete(self, prompt, config, task=""):
        role = config.role_name
        if role not in self.clients:
            self.clients[role] = self.factory(role)
        return self.clients[role].complete(prompt, config, task)


def default_session_id() -> str:
    return "session-" + datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def run_session(
    spec: ApiSpecification,
    base_url: str,
    config: SessionConfig,
    client_factory: ClientSource,
    *,
    session_id: str | None = None,
    static_headers: Mapping[str, str] | None = None,
    templates_dir: str | Path | None = None,
    before_scenario: Callable[[EmtPlan], None] | None = None,
    clock: Callable[[], float] = time.monotonic,
    executor: Executor | None = None,
):
    """Drive one test generation session and return its :class:`SessionReport`."""
    from .reporting import build_report

    config.validate()
    if not spec.operations:
        raise FatalConfigError("the specification documents no operations")
    client = client_factory if isinstance(client_factory, LlmClient) else _RoutedClient(client_factory)
    executor = executor or Executor(spec, base_url, config.per_request_timeout, dict(static_headers or {}))
    configs = config.agent_configs
    state = SessionState(total_operations=len(spec.operations), started_at=clock())
    stop_reason: str | None = None

    while stop_reason is None:
        iteration = state.iteration_index + 1
        iter_start = clock()
        diagnostics: list[Diagnostic] = []
        ctx = PromptContext(
            openapi_spec=spec.raw_text,
            no_tests=config.batch_bound,
            base_url=base_url,
            prev_tests=list(state.all_hlmts),
            uncovered_operations=uncovered_operations(state, spec),
        )
        try:
            candidates = generate_hlmts(
                client, ctx, config.batch_bound, iteration_index=iteration, configs=configs,
                templates_dir=templates_dir, diagnostics=diagnostics,
            )
        except (NoArrayFound, LlmTransportError) as exc:
            log.warning("iteration %d: generator produced nothing usable (%s)", iteration, exc)
            diagnostics.append(Diagnostic("generator", str(exc)))
            candidates = []

        hlmts: list[Hlmt] = []
        if candidates:
            refined = refine_hlmts(
                client, spec, candidates, base_url=base_url, configs=configs,
                templates_dir=templates_dir, diagnostics=diagnostics,
            )
            for h in refined:
                problems = validate_hlmt(h, hlmts)
                if problems:
                    diagnostics.extend(Diagnostic(f"{h.id}.{d.field}", d.reason) for d in problems)
                    continue
                hlmts.append(h)

        plans: list[EmtPlan] = []
        repairs = 0
        for h in hlmts:
            plan, budget = lower_hlmt(
                client, h, spec, base_url, config.repair_max_attempts, configs=configs, templates_dir=templates_dir
            )
            repairs += budget.attempts_used
            plans.append(plan)

        results: list[ScenarioResult] = []
        for plan in plans:
            if before_scenario is not None and not plan.placeholder:
                before_scenario(plan)
            remaining = max(config.request_budget - state.requests_spent, 0)
            result = executor.execute(plan, remaining, iteration)
            state.requests_spent += result.requests_spent
            results.append(result)

        before_cov = state.coverage_percent
        known_slugs = state.slugs
        state = update_coverage(state, results, spec)
        new_slugs = len({h.semantic_slug for h in hlmts} - known_slugs)
        state = account_progress(state, new_slugs, state.coverage_percent - before_cov)
        state.all_hlmts.extend(hlmts)
        state.iteration_index = iteration
        state.iteration_summaries.append(
            IterationRecord(
                index=iteration,
                hlmts=hlmts,
                plans=plans,
                results=results,
                diagnostics=diagnostics,
                new_slugs=new_slugs,
                coverage_percent=state.coverage_percent,
                covered=state.covered_operations,
                elapsed=clock() - iter_start,
                plateau_counter=state.plateau_counter,
                repair_attempts=repairs,
            )
        )
        log.info(
            "iteration %d: %d HLMTs, %d scenarios, coverage %.1f%%, plateau %d/%d",
            iteration, len(hlmts), len(results), state.coverage_percent, state.plateau_counter, config.plateau_window,
        )

        decision = should_stop(state, config, clock())
        if decision.stop:
            stop_reason = decision.reason
        elif not candidates:
            stop_reason = NO_NEW_TESTS

    return build_report(
        session_id=session_id or default_session_id(),
        spec=spec,
        config=config,
        state=state,
        stop_reason=stop_reason,
        elapsed=clock() - state.started_at,
    )
