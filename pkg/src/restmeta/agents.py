"""Prompt rendering and the four agents: MR generation, MR refinement, plan
generation and the bounded plan repair loop."""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AmbiguousMatch, LlmTransportError, MissingPlaceholder, NoArrayFound, PlanParseError
from .llm import AgentConfig, LlmClient
from .mtmodel import Diagnostic, Hlmt, hlmts_to_json, parse_hlmt_list
from .plan import EmtPlan, make_placeholder, parse_plan, validate_plan
from .specmodel import HTTP_METHODS, ApiSpecification, list_operations, resolve_operation

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("mr_generate", "mr_refine", "emt_generate", "emt_repair")
TEMPLATE_ROLES = {
    "mr_generate": "mr_generator",
    "mr_refine": "mr_refiner",
    "emt_generate": "test_generator",
    "emt_repair": "code_refiner",
}
PLACEHOLDER_NAMES = (
    "openapi_spec",
    "no_tests",
    "base_url",
    "prev_tests",
    "uncovered_operations",
    "candidates",
    "operations",
    "hlmt_id",
    "scenario",
    "given",
    "when",
    "then",
    "diagnostics",
    "previous_output",
)
_SLOT = re.compile(r"\{(" + "|".join(PLACEHOLDER_NAMES) + r")\}")
_PACKAGED = Path(__file__).parent / "templates"


@dataclass
class PromptContext:
    openapi_spec: str
    no_tests: int
    base_url: str
    prev_tests: Sequence[Hlmt] = ()
    uncovered_operations: Sequence[tuple[str, str]] = ()
    extra: Mapping[str, str] = field(default_factory=dict)

    def values(self) -> dict[str, str]:
        uncovered = "\n".join(f"{m} {p}" for m, p in self.uncovered_operations) or "(none)"
        out = {
            "openapi_spec": self.openapi_spec,
            "no_tests": str(self.no_tests),
            "base_url": self.base_url,
            "prev_tests": hlmts_to_json(self.prev_tests),
            "uncovered_operations": uncovered,
        }
        out.update(self.extra)
        return out


@dataclass
class RepairBudget:
    max_attempts: int = 2
    attempts_used: int = 0

    @property
    def exhausted(self) -> bool:
        return self.attempts_used >= self.max_attempts


def load_template(name: str, templates_dir: str | Path | None = None) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    if templates_dir is not None:
        override = Path(templates_dir) / f"{name}.txt"
        if override.is_file():
            return override.read_text(encoding="utf-8")
    return (_PACKAGED / f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(
    template_name: str,
    ctx: PromptContext,
    extra: Mapping[str, str] | None = None,
    templates_dir: str | Path | None = None,
) -> str:
    """Substitute ``{slot}`` values into a template in a single pass.

    Only the known slot names are substituted; other braces (JSON examples,
    path placeholders) are left alone. A known slot without a value raises
    :class:`MissingPlaceholder`.
    """
    template = load_template(template_name, templates_dir)
    values = ctx.values()
    if extra:
        values.update(extra)

    def fill(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise MissingPlaceholder(f"template {template_name!r} needs {{{name}}}")
        return values[name]

    return _SLOT.sub(fill, template)


def _config(configs: Mapping[str, AgentConfig] | None, template: str) -> AgentConfig:
    role = TEMPLATE_ROLES[template]
    if configs and role in configs:
        return configs[role]
    return AgentConfig(role)


def _operations_listing(spec: ApiSpecification) -> str:
    return "\n".join(str(op) for op in list_operations(spec))


def _hlmt_slots(hlmt: Hlmt) -> dict[str, str]:
    return {
        "hlmt_id": hlmt.id,
        "scenario": hlmt.scenario_title,
        "given": hlmt.given_text,
        "when": hlmt.when_text,
        "then": hlmt.then_text,
    }


# -- MR generation -----------------------------------------------------------


def generate_hlmts(
    client: LlmClient,
    ctx: PromptContext,
    batch_bound: int,
    *,
    iteration_index: int = 1,
    configs: Mapping[str, AgentConfig] | None = None,
    templates_dir: str | Path | None = None,
    diagnostics: list[Diagnostic] | None = None,
) -> list[Hlmt]:
    """Ask the generator for a batch of new HLMTs, keeping at most ``batch_bound``."""
    prompt = render_prompt("mr_generate", ctx, templates_dir=templates_dir)
    raw = client.complete(prompt, _config(configs, "mr_generate"), "mr_generate")
    hlmts = parse_hlmt_list(raw, iteration_index, diagnostics)
    if len(hlmts) > batch_bound:
        log.info("generator returned %d candidates; keeping the first %d", len(hlmts), batch_bound)
        if diagnostics is not None:
            diagnostics.append(Diagnostic("batch", f"truncated {len(hlmts)} candidates to {batch_bound}"))
        hlmts = hlmts[:batch_bound]
    return hlmts


# -- MR refinement -----------------------------------------------------------

_MENTION = re.compile(r"\b(" + "|".join(HTTP_METHODS) + r")\s+(/[^\s,;)\"'`]*)")


def mentioned_operations(text: str) -> list[tuple[str, str]]:
    """``METHOD /path`` mentions in free text (trailing sentence punctuation dropped)."""
    return [(m.group(1), m.group(2).rstrip(".:!?")) for m in _MENTION.finditer(text)]


def unsupported_mentions(hlmt: Hlmt, spec: ApiSpecification) -> list[tuple[str, str]]:
    bad = []
    for text in (hlmt.scenario_title, hlmt.given_text, hlmt.when_text, hlmt.then_text):
        for method, path in mentioned_operations(text):
            if spec.get(method, path) is not None:
                continue
            try:
                if resolve_operation(spec, method, path) is not None:
                    continue
            except AmbiguousMatch:
                continue
            bad.append((method, path))
    return bad


def spec_filter(
    hlmts: Iterable[Hlmt], spec: ApiSpecification, diagnostics: list[Diagnostic] | None = None
) -> list[Hlmt]:
    kept = []
    for h in hlmts:
        bad = unsupported_mentions(h, spec)
        if bad:
            reason = "references undocumented operation(s) " + ", ".join(f"{m} {p}" for m, p in bad)
            log.info("dropping %s: %s", h.id, reason)
            if diagnostics is not None:
                diagnostics.append(Diagnostic(h.id, reason))
            continue
        kept.append(h)
    return kept


def refine_hlmts(
    client: LlmClient,
    spec: ApiSpecification,
    candidates: Sequence[Hlmt],
    *,
    base_url: str = "",
    configs: Mapping[str, AgentConfig] | None = None,
    templates_dir: str | Path | None = None,
    diagnostics: list[Diagnostic] | None = None,
) -> list[Hlmt]:
    """Align candidates with the API document.

    The model's answer is advisory: it may drop or reword candidates (by id).
    The local filter, which rejects any candidate naming an undocumented
    ``METHOD /path``, always has the last word. Transport failures and
    unusable answers fall back to the local filter alone.
    """
    if not candidates:
        return []
    ctx = PromptContext(spec.raw_text, len(candidates), base_url)
    prompt = render_prompt("mr_refine", ctx, {"candidates": hlmts_to_json(candidates)}, templates_dir)
    by_id = {h.id: h for h in candidates}
    survivors: list[Hlmt] = list(candidates)
    try:
        raw = client.complete(prompt, _config(configs, "mr_refine"), "mr_refine")
    except LlmTransportError as exc:
        log.warning("refiner unavailable (%s); using the local spec filter only", exc)
        raw = ""
    if raw.strip():
        try:
            refined = parse_hlmt_list(raw, candidates[0].iteration_index, diagnostics)
        except NoArrayFound:
            log.warning("refiner output had no array; using the local spec filter only")
        else:
            answered = {}
            for h in refined:
                if h.id not in by_id:
                    if diagnostics is not None:
                        diagnostics.append(Diagnostic(h.id, "refiner returned an unknown id; ignored"))
                    continue
                answered.setdefault(h.id, dataclasses.replace(h, iteration_index=by_id[h.id].iteration_index))
            for h in candidates:
                if h.id not in answered and diagnostics is not None:
                    diagnostics.append(Diagnostic(h.id, "dropped by refiner"))
            survivors = [answered[h.id] for h in candidates if h.id in answered]
    else:
        log.info("refiner returned nothing; using the local spec filter only")
    return spec_filter(survivors, spec, diagnostics)


# -- plan generation and repair ----------------------------------------------


def label_diagnostics(plan: EmtPlan, hlmt: Hlmt) -> list[Diagnostic]:
    diags = []
    for name, got, want in zip(("given", "when", "then"), plan.labels, (hlmt.given_text, hlmt.when_text, hlmt.then_text)):
        if got != want:
            diags.append(Diagnostic(f"labels.{name}", "label mismatch: must equal the HLMT text verbatim"))
    return diags


def _accept(raw: str, hlmt: Hlmt) -> EmtPlan:
    try:
        plan = parse_plan(raw)
    except PlanParseError as exc:
        exc.raw_output = raw
        raise
    mismatch = label_diagnostics(plan, hlmt)
    if mismatch:
        err = PlanParseError("label mismatch", mismatch)
        err.raw_output = raw
        raise err
    if plan.hlmt_id != hlmt.id:
        plan = dataclasses.replace(plan, hlmt_id=hlmt.id)
    return plan


def generate_emt(
    client: LlmClient,
    hlmt: Hlmt,
    spec: ApiSpecification,
    base_url: str,
    *,
    configs: Mapping[str, AgentConfig] | None = None,
    templates_dir: str | Path | None = None,
) -> EmtPlan:
    """Lower one HLMT to a plan whose labels are the HLMT's texts verbatim."""
    ctx = PromptContext(spec.raw_text, 1, base_url)
    extra = {"operations": _operations_listing(spec), **_hlmt_slots(hlmt)}
    prompt = render_prompt("emt_generate", ctx, extra, templates_dir)
    raw = client.complete(prompt, _config(configs, "emt_generate"), "emt_generate")
    return _accept(raw, hlmt)


def repair_emt_loop(
    client: LlmClient,
    plan_or_error: EmtPlan | PlanParseError | Sequence[Diagnostic],
    hlmt: Hlmt,
    spec: ApiSpecification,
    budget: RepairBudget,
    *,
    base_url: str = "",
    configs: Mapping[str, AgentConfig] | None = None,
    templates_dir: str | Path | None = None,
) -> EmtPlan:
    """Validate and, if needed, re-prompt with diagnostics up to ``budget.max_attempts`` times.

    Exhaustion yields the placeholder plan for ``hlmt``; nothing is raised.
    """
    if isinstance(plan_or_error, EmtPlan):
        plan: EmtPlan | None = plan_or_error
        previous = plan_or_error.to_json()
        diags = label_diagnostics(plan_or_error, hlmt) + validate_plan(plan_or_error, spec)
    elif isinstance(plan_or_error, PlanParseError):
        plan = None
        previous = getattr(plan_or_error, "raw_output", "")
        diags = plan_or_error.diagnostics or [Diagnostic("plan", str(plan_or_error))]
    else:
        plan = None
        previous = ""
        diags = list(plan_or_error) or [Diagnostic("plan", "no plan")]

    ctx = PromptContext(spec.raw_text, 1, base_url)
    while diags:
        if budget.exhausted:
            log.info("%s: repair budget exhausted; inserting placeholder plan", hlmt.id)
            return make_placeholder(hlmt)
        budget.attempts_used += 1
        extra = {
            "operations": _operations_listing(spec),
            "diagnostics": "\n".join(f"- {d}" for d in diags),
            "previous_output": previous or "(no output)",
            **_hlmt_slots(hlmt),
        }
        prompt = render_prompt("emt_repair", ctx, extra, templates_dir)
        try:
            raw = client.complete(prompt, _config(configs, "emt_repair"), "emt_repair")
        except LlmTransportError as exc:
            diags = [Diagnostic("transport", str(exc))]
            continue
        previous = raw
        try:
            plan = _accept(raw, hlmt)
        except PlanParseError as exc:
            diags = exc.diagnostics or [Diagnostic("plan", str(exc))]
            continue
        diags = validate_plan(plan, spec)
    assert plan is not None
    return plan


def lower_hlmt(
    client: LlmClient,
    hlmt: Hlmt,
    spec: ApiSpecification,
    base_url: str,
    max_attempts: int,
    *,
    configs: Mapping[str, AgentConfig] | None = None,
    templates_dir: str | Path | None = None,
) -> tuple[EmtPlan, RepairBudget]:
    """generate_emt followed by the repair loop; transport errors become diagnostics."""
    budget = RepairBudget(max_attempts)
    try:
        first: EmtPlan | PlanParseError | list[Diagnostic] = generate_emt(
            client, hlmt, spec, base_url, configs=configs, templates_dir=templates_dir
        )
    except PlanParseError as exc:
        first = exc
    except LlmTransportError as exc:
        first = [Diagnostic("transport", str(exc))]
    plan = repair_emt_loop(
        client, first, hlmt, spec, budget, base_url=base_url, configs=configs, templates_dir=templates_dir
    )
    return plan, budget
