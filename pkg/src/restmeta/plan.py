"""Declarative executable metamorphic test plans.

A plan is a JSON document: ordered request steps for the seed (Given) and
follow-up (When) phases, named value extractions, and relation assertions
checked in the Then phase. Binding references are written ``${name}``; a
string that is exactly one reference is replaced by the bound value with its
JSON type intact, otherwise references are interpolated as text.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

from .errors import AmbiguousMatch, ExtractionMiss, PlanParseError
from .lenient import loads_object
from .mtmodel import Diagnostic, Hlmt
from .specmodel import HTTP_METHODS, ApiSpecification, placeholders, resolve_operation

RELATION_KINDS = ("equality", "difference", "inclusion", "exclusion", "count-delta")
COUNT = "#count"
ROOTS = ("@body", "@headers", "@status")

_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_.-]*)\}")
_WHOLE_REF = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_.-]*)\}$")


# -- value paths --------------------------------------------------------------


@dataclass(frozen=True)
class ValuePath:
    """Navigation into a response: ``items/0/id``, ``items/#count``,
    ``@headers/X-Rate-Limit`` or ``@status``. An empty path is the whole body."""

    root: str = "@body"
    segments: tuple[str | int, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "ValuePath":
        parts = [p for p in str(text).strip().strip("/").split("/") if p != ""]
        root = "@body"
        if parts and parts[0] in ROOTS:
            root = parts.pop(0)
        segments: list[str | int] = []
        for i, part in enumerate(parts):
            if part == COUNT and i != len(parts) - 1:
                raise ValueError(f"{COUNT} is only allowed as the last segment of {text!r}")
            segments.append(int(part) if part.isdigit() else part)
        if root == "@status" and segments:
            raise ValueError("@status takes no further segments")
        if root == "@headers" and len(segments) != 1:
            raise ValueError("@headers takes exactly one header name")
        return cls(root, tuple(segments))

    def __str__(self) -> str:
        parts = [] if self.root == "@body" else [self.root]
        return "/".join(parts + [str(s) for s in self.segments])


def extract_value(document: Any, path: ValuePath | str) -> Any:
    """Navigate ``document`` (a decoded body or a header mapping) along ``path``.

    ``#count`` yields the length of the array (or object, or string) reached
    so far. Raises :class:`ExtractionMiss` for missing keys or indices.
    """
    if isinstance(path, str):
        path = ValuePath.parse(path)
    node = document
    for seg in path.segments:
        if seg == COUNT:
            if isinstance(node, (list, dict, str)):
                return len(node)
            raise ExtractionMiss(f"{COUNT} applied to {type(node).__name__} at {path}")
        if isinstance(node, list):
            if not isinstance(seg, int) or seg >= len(node):
                raise ExtractionMiss(f"no index {seg!r} at {path}")
            node = node[seg]
        elif isinstance(node, Mapping):
            key = str(seg)
            if key not in node:
                raise ExtractionMiss(f"no key {key!r} at {path}")
            node = node[key]
        else:
            raise ExtractionMiss(f"cannot descend into {type(node).__name__} with {seg!r} at {path}")
    return node


# -- relation predicates -----------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def json_equal(a: Any, b: Any) -> bool:
    """Deep JSON equality: 1 == 1.0, but booleans are never numbers."""
    if _is_number(a) and _is_number(b):
        return a == b
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(json_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(json_equal(a[k], b[k]) for k in a)
    if type(a) is not type(b):
        return False
    return a == b


def json_includes(container: Any, item: Any) -> bool | None:
    """Membership / substring / object-subset; None when the types don't fit."""
    if isinstance(container, list):
        return any(json_equal(x, item) for x in container)
    if isinstance(container, str) and isinstance(item, str):
        return item in container
    if isinstance(container, dict) and isinstance(item, dict):
        return all(k in container and json_equal(container[k], v) for k, v in item.items())
    return None


@dataclass(frozen=True)
class RelationAssertion:
    kind: str
    left: str
    right: Any
    delta: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind, "left": self.left, "right": self.right}
        if self.delta is not None:
            d["delta"] = self.delta
        return d


@dataclass(frozen=True)
class RelationOutcome:
    holds: bool
    reason: str = ""

    @property
    def verdict(self) -> str:
        return "holds" if self.holds else "violated"


def check_relation(assertion: RelationAssertion, left: Any, right: Any) -> RelationOutcome:
    kind = assertion.kind
    if kind == "equality":
        ok = json_equal(left, right)
        return RelationOutcome(ok, "" if ok else f"{_short(left)} != {_short(right)}")
    if kind == "difference":
        ok = not json_equal(left, right)
        return RelationOutcome(ok, "" if ok else f"both sides equal {_short(left)}")
    if kind in ("inclusion", "exclusion"):
        included = json_includes(left, right)
        if kind == "inclusion":
            if included is None:
                return RelationOutcome(False, f"type mismatch: cannot look for {type(right).__name__} in {type(left).__name__}")
            return RelationOutcome(included, "" if included else f"{_short(right)} not in {_short(left)}")
        holds = not included
        return RelationOutcome(holds, "" if holds else f"{_short(right)} found in {_short(left)}")
    if kind == "count-delta":
        if not (_is_number(left) and _is_number(right)) or not _is_number(assertion.delta):
            return RelationOutcome(False, "type mismatch: count-delta needs numeric operands")
        diff = left - right
        ok = math.isclose(diff, assertion.delta, rel_tol=0, abs_tol=1e-9)
        return RelationOutcome(ok, "" if ok else f"{left} - {right} = {diff}, expected {assertion.delta}")
    return RelationOutcome(False, f"unknown relation kind {kind!r}")


def _short(value: Any, limit: int = 80) -> str:
    text = json.dumps(value, sort_keys=True, ensure_ascii=False)
    return text if len(text) <= limit else text[: limit - 3] + "..."


# -- plan documents ----------------------------------------------------------


@dataclass(frozen=True)
class RequestStep:
    method: str
    path_template: str
    path_args: Mapping[str, Any] = field(default_factory=dict)
    query: Mapping[str, Any] = field(default_factory=dict)
    headers: Mapping[str, Any] = field(default_factory=dict)
    body: Any = None
    expect_success: bool = True
    extract: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "path": self.path_template,
            "path_args": dict(self.path_args),
            "query": dict(self.query),
            "headers": dict(self.headers),
            "body": self.body,
            "expect_success": self.expect_success,
            "extract": dict(self.extract),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RequestStep":
        if not isinstance(data, Mapping):
            raise PlanParseError(f"step must be an object, got {type(data).__name__}")
        try:
            method, path = data["method"], data["path"]
        except KeyError as exc:
            raise PlanParseError(f"step is missing {exc.args[0]!r}") from None
        return cls(
            method=str(method).upper(),
            path_template=str(path),
            path_args=dict(data.get("path_args") or {}),
            query=dict(data.get("query") or {}),
            headers=dict(data.get("headers") or {}),
            body=data.get("body"),
            expect_success=bool(data.get("expect_success", True)),
            extract={str(k): str(v) for k, v in (data.get("extract") or {}).items()},
        )

    def references(self) -> set[str]:
        return set(iter_references([self.path_args, self.query, self.headers, self.body]))


@dataclass(frozen=True)
class EmtPlan:
    hlmt_id: str
    given_label: str
    when_label: str
    then_label: str
    given_steps: tuple[RequestStep, ...] = ()
    when_steps: tuple[RequestStep, ...] = ()
    assertions: tuple[RelationAssertion, ...] = ()
    placeholder: bool = False

    @property
    def steps(self) -> list[tuple[str, RequestStep]]:
        return [("given", s) for s in self.given_steps] + [("when", s) for s in self.when_steps]

    @property
    def bindings(self) -> dict[str, ValuePath]:
        out: dict[str, ValuePath] = {}
        for _, step in self.steps:
            for name, raw in step.extract.items():
                try:
                    out[name] = ValuePath.parse(raw)
                except ValueError:
                    continue
        return out

    @property
    def labels(self) -> tuple[str, str, str]:
        return (self.given_label, self.when_label, self.then_label)

    def to_dict(self) -> dict[str, Any]:
        return {
            "hlmt_id": self.hlmt_id,
            "labels": {"given": self.given_label, "when": self.when_label, "then": self.then_label},
            "given_steps": [s.to_dict() for s in self.given_steps],
            "when_steps": [s.to_dict() for s in self.when_steps],
            "assertions": [a.to_dict() for a in self.assertions],
            "placeholder": self.placeholder,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EmtPlan":
        if not isinstance(data, Mapping):
            raise PlanParseError("plan must be a JSON object")
        labels = data.get("labels")
        if not isinstance(labels, Mapping):
            raise PlanParseError("plan has no labels object", [Diagnostic("labels", "missing")])
        assertions = []
        for i, raw in enumerate(data.get("assertions") or ()):
            if not isinstance(raw, Mapping) or "kind" not in raw or "left" not in raw:
                raise PlanParseError(f"assertion {i} is malformed", [Diagnostic(f"assertions[{i}]", "malformed")])
            delta = raw.get("delta")
            assertions.append(RelationAssertion(str(raw["kind"]), _as_ref(raw["left"]), raw.get("right"), delta))
        return cls(
            hlmt_id=str(data.get("hlmt_id", "")),
            given_label=str(labels.get("given", "")),
            when_label=str(labels.get("when", "")),
            then_label=str(labels.get("then", "")),
            given_steps=tuple(RequestStep.from_dict(s) for s in data.get("given_steps") or ()),
            when_steps=tuple(RequestStep.from_dict(s) for s in data.get("when_steps") or ()),
            assertions=tuple(assertions),
            placeholder=bool(data.get("placeholder", False)),
        )


def _as_ref(value: Any) -> str:
    text = str(value)
    return text if _WHOLE_REF.match(text) else "${" + text + "}"


def parse_plan(raw_output: str) -> EmtPlan:
    """Recover a plan from model output (fences and light syntax damage tolerated)."""
    data = loads_object(raw_output)
    if data is None:
        raise PlanParseError("no plan object found in output", [Diagnostic("plan", "no JSON object found")])
    if "labels" not in data and isinstance(data.get("plan"), Mapping):
        data = data["plan"]
    return EmtPlan.from_dict(data)


def make_placeholder(hlmt: Hlmt) -> EmtPlan:
    """No-op stand-in used once repair attempts run out."""
    return EmtPlan(
        hlmt_id=hlmt.id,
        given_label=hlmt.given_text,
        when_label=hlmt.when_text,
        then_label=hlmt.then_text,
        placeholder=True,
    )


# -- binding references ------------------------------------------------------


def iter_references(value: Any) -> Iterator[str]:
    if isinstance(value, str):
        yield from _REF.findall(value)
    elif isinstance(value, Mapping):
        for v in value.values():
            yield from iter_references(v)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from iter_references(v)


def substitute(value: Any, bindings: Mapping[str, Any]) -> Any:
    """Replace ``${name}`` references; raises KeyError on an unbound name."""
    if isinstance(value, str):
        whole = _WHOLE_REF.match(value)
        if whole:
            return bindings[whole.group(1)]

        def text(m: re.Match) -> str:
            bound = bindings[m.group(1)]
            return bound if isinstance(bound, str) else json.dumps(bound)

        return _REF.sub(text, value)
    if isinstance(value, Mapping):
        return {k: substitute(v, bindings) for k, v in value.items()}
    if isinstance(value, list):
        return [substitute(v, bindings) for v in value]
    return value


def reference_name(value: Any) -> str | None:
    if isinstance(value, str):
        m = _WHOLE_REF.match(value)
        if m:
            return m.group(1)
    return None


# -- structural validation ---------------------------------------------------


def validate_plan(plan: EmtPlan, spec: ApiSpecification) -> list[Diagnostic]:
    """Structural checks standing in for a syntax check of generated code."""
    diags: list[Diagnostic] = []
    for name, label in zip(("given", "when", "then"), plan.labels):
        if not label.strip():
            diags.append(Diagnostic(f"labels.{name}", "empty label"))

    if plan.placeholder:
        if plan.given_steps or plan.when_steps or plan.assertions:
            diags.append(Diagnostic("placeholder", "placeholder plans must not contain steps or assertions"))
        return diags

    if not plan.given_steps:
        diags.append(Diagnostic("given_steps", "at least one Given step is required"))
    if not plan.when_steps:
        diags.append(Diagnostic("when_steps", "at least one When step is required"))
    if not plan.assertions:
        diags.append(Diagnostic("assertions", "at least one assertion is required"))

    defined_at: dict[str, int] = {}
    ordered = plan.steps
    for index, (_, step) in enumerate(ordered):
        for name in step.extract:
            defined_at.setdefault(name, index)

    seen: set[str] = set()
    counters = {"given": 0, "when": 0}
    for index, (phase, step) in enumerate(ordered):
        where = f"{phase}_steps[{counters[phase]}]"
        counters[phase] += 1
        diags.extend(_check_operation(step, spec, where))
        for param in placeholders(step.path_template):
            if param not in step.path_args:
                diags.append(Diagnostic(where, f"path_args has no value for {{{param}}}"))
        for ref in sorted(step.references()):
            if ref in seen:
                continue
            if ref in defined_at:
                diags.append(Diagnostic(where, f"forward reference to ${{{ref}}} (bound by a later step)"))
            else:
                diags.append(Diagnostic(where, f"undefined binding ${{{ref}}}"))
        for name, raw in step.extract.items():
            try:
                ValuePath.parse(raw)
            except ValueError as exc:
                diags.append(Diagnostic(where, f"bad value path for {name!r}: {exc}"))
            if name in seen:
                diags.append(Diagnostic(where, f"binding {name!r} is defined twice"))
        seen.update(step.extract)

    for i, assertion in enumerate(plan.assertions):
        where = f"assertions[{i}]"
        if assertion.kind not in RELATION_KINDS:
            diags.append(Diagnostic(where, f"unknown relation kind {assertion.kind!r}"))
        left = reference_name(assertion.left)
        if left is None:
            diags.append(Diagnostic(where, "left operand must be a binding reference"))
        refs = [left] if left else []
        refs += list(iter_references(assertion.right))
        for ref in refs:
            if ref not in seen:
                diags.append(Diagnostic(where, f"undefined binding ${{{ref}}}"))
        if assertion.kind == "count-delta" and not (
            isinstance(assertion.delta, int) and not isinstance(assertion.delta, bool)
        ):
            diags.append(Diagnostic(where, "count-delta requires an integer delta"))
    return diags


def _check_operation(step: RequestStep, spec: ApiSpecification, where: str) -> list[Diagnostic]:
    if step.method not in HTTP_METHODS:
        return [Diagnostic(where, f"unknown HTTP method {step.method!r}")]
    if not step.path_template.startswith("/"):
        return [Diagnostic(where, f"path {step.path_template!r} must begin with '/'")]
    if spec.get(step.method, step.path_template.split("?", 1)[0]) is not None:
        return []
    try:
        op = resolve_operation(spec, step.method, step.path_template)
    except AmbiguousMatch:
        return []
    if op is None:
        return [Diagnostic(where, f"unknown operation {step.method} {step.path_template}")]
    return []
