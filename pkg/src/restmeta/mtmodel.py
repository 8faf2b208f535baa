"""High-level metamorphic tests (Given/When/Then scenarios) and their grouping."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .lenient import loads_array

log = logging.getLogger(__name__)

_MR_ID = re.compile(r"(?<![a-z0-9])mr\s*[0-9]+(?![a-z0-9])", re.ASCII)
_NON_ALNUM = re.compile(r"[^a-z0-9]+")

HLMT_FIELDS = ("id", "scenario", "given", "when", "then")


def normalize_title(title: str) -> str:
    """Deterministic slug of a scenario title.

    Lowercases, removes MR identifiers such as ``MR 12``/``MR12`` wherever
    they occur, turns every run of non-alphanumerics into one underscore and
    trims underscores from both ends.
    """
    text = title.lower()
    text = _MR_ID.sub(" ", text)
    text = _NON_ALNUM.sub("_", text)
    text = re.sub(r"_+", "_", text)
    return text.strip("_")


@dataclass(frozen=True)
class Diagnostic:
    field: str
    reason: str

    def __str__(self) -> str:
        return f"{self.field}: {self.reason}"


@dataclass(frozen=True)
class Hlmt:
    id: str
    scenario_title: str
    given_text: str
    when_text: str
    then_text: str
    iteration_index: int = 1
    semantic_slug: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "semantic_slug", normalize_title(self.scenario_title))

    def to_dict(self) -> dict[str, str]:
        return {
            "id": self.id,
            "scenario": self.scenario_title,
            "given": self.given_text,
            "when": self.when_text,
            "then": self.then_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], iteration_index: int = 1) -> "Hlmt":
        return cls(
            id=str(data["id"]),
            scenario_title=str(data["scenario"]),
            given_text=str(data["given"]),
            when_text=str(data["when"]),
            then_text=str(data["then"]),
            iteration_index=iteration_index,
        )


@dataclass(frozen=True)
class SemanticGroup:
    slug: str
    member_refs: tuple[tuple[str, int, str], ...]

    def __len__(self) -> int:
        return len(self.member_refs)


def hlmts_to_json(hlmts: Iterable[Hlmt], indent: int | None = 2) -> str:
    return json.dumps([h.to_dict() for h in hlmts], indent=indent, ensure_ascii=False)


def _field_lookup(obj: Mapping[str, Any]) -> dict[str, Any]:
    # keys are matched case-insensitively; "Given"/"THEN" are common
    lowered = {}
    for key, value in obj.items():
        lowered.setdefault(str(key).strip().lower(), value)
    return lowered


def parse_hlmt_list(
    raw_output: str,
    iteration_index: int = 1,
    diagnostics: list[Diagnostic] | None = None,
) -> list[Hlmt]:
    """Extract HLMTs from free-form model output.

    Objects missing a required field are dropped; a :class:`Diagnostic` is
    appended to ``diagnostics`` (when given) and logged. Raises
    :class:`~restmeta.errors.NoArrayFound` if no array can be recovered.
    """
    items = loads_array(raw_output)
    result: list[Hlmt] = []
    for index, item in enumerate(items):
        if not isinstance(item, Mapping):
            _drop(diagnostics, f"[{index}]", f"expected an object, got {type(item).__name__}")
            continue
        fields = _field_lookup(item)
        missing = [name for name in HLMT_FIELDS if fields.get(name) is None]
        if missing:
            _drop(diagnostics, f"[{index}]", "missing field(s) " + ", ".join(missing))
            continue
        result.append(Hlmt.from_dict(fields, iteration_index))
    return result


def _drop(diagnostics, where: str, reason: str) -> None:
    log.info("dropping HLMT candidate %s: %s", where, reason)
    if diagnostics is not None:
        diagnostics.append(Diagnostic(where, reason))


def validate_hlmt(hlmt: Hlmt, iteration_hlmts: Iterable[Hlmt] = ()) -> list[Diagnostic]:
    """Sanity checks before lowering. ``iteration_hlmts`` supplies id-uniqueness context."""
    diags = []
    if not hlmt.id.strip():
        diags.append(Diagnostic("id", "empty"))
    for name, value in (
        ("scenario", hlmt.scenario_title),
        ("given", hlmt.given_text),
        ("when", hlmt.when_text),
        ("then", hlmt.then_text),
    ):
        if not value.strip():
            diags.append(Diagnostic(name, "empty"))
    clash = any(
        other is not hlmt and other.id == hlmt.id and other.iteration_index == hlmt.iteration_index
        for other in iteration_hlmts
    )
    if clash:
        diags.append(Diagnostic("id", f"duplicate id {hlmt.id!r} in iteration {hlmt.iteration_index}"))
    return diags


def group_semantic(hlmts: Iterable[Hlmt], session_id: str = "") -> list[SemanticGroup]:
    """One group per distinct slug, in order of first appearance."""
    return group_across_sessions({session_id: hlmts})


def group_across_sessions(sessions: Mapping[str, Iterable[Hlmt]]) -> list[SemanticGroup]:
    members: dict[str, list[tuple[str, int, str]]] = {}
    for session_id, hlmts in sessions.items():
        for h in hlmts:
            members.setdefault(h.semantic_slug, []).append((session_id, h.iteration_index, h.id))
    return [SemanticGroup(slug, tuple(refs)) for slug, refs in members.items()]
