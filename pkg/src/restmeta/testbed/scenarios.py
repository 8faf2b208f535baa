"""Canned HLMTs, their plans, and helpers that lay them out as scripted model responses.

Each scenario passes against a fault-free testbed and is the single target of
one fault flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..mtmodel import Hlmt
from ..plan import EmtPlan
from .server import (
    CRASH_ON_SEQUENCE,
    DROP_STATUS_UPDATE,
    INVALID_EXPIRES_HEADER,
    REJECT_MISSING_FIELD,
    SLOW_ENDPOINT,
)


@dataclass(frozen=True)
class CannedScenario:
    name: str
    fault: str
    expected_class: str
    hlmt: Hlmt
    plan: EmtPlan


def _plan(hlmt: Hlmt, given: list[dict], when: list[dict], assertions: list[dict]) -> EmtPlan:
    return EmtPlan.from_dict(
        {
            "hlmt_id": hlmt.id,
            "labels": {"given": hlmt.given_text, "when": hlmt.when_text, "then": hlmt.then_text},
            "given_steps": given,
            "when_steps": when,
            "assertions": assertions,
        }
    )


def _status_update() -> CannedScenario:
    hlmt = Hlmt(
        "MR26",
        "Updating a pet's status should be observable when retrieving that pet by its identifier.",
        "a pet is created and then fetched by its identifier; the fetched pet is the seed output, "
        "including its current status.",
        "the pet's status is changed with POST /pet/{petId} and the same pet is fetched again by the "
        "same identifier; that response is the follow-up output.",
        "the follow-up status differs from the seed status, and the identifier is unchanged.",
    )
    pet_path = {"petId": "${seed_id}"}
    plan = _plan(
        hlmt,
        given=[
            {"method": "POST", "path": "/pet",
             "body": {"id": 1, "name": "doggie", "photoUrls": ["url1"], "status": "available"}},
            {"method": "GET", "path": "/pet/{petId}", "path_args": {"petId": 1},
             "extract": {"seed_id": "id", "seed_status": "status"}},
        ],
        when=[
            {"method": "POST", "path": "/pet/{petId}", "path_args": pet_path, "query": {"status": "sold"}},
            {"method": "GET", "path": "/pet/{petId}", "path_args": pet_path,
             "extract": {"follow_id": "id", "follow_status": "status"}},
        ],
        assertions=[
            {"kind": "equality", "left": "${follow_id}", "right": "${seed_id}"},
            {"kind": "difference", "left": "${follow_status}", "right": "${seed_status}"},
        ],
    )
    return CannedScenario("status-update", DROP_STATUS_UPDATE, "relation-violation", hlmt, plan)


def _repeat_login() -> CannedScenario:
    hlmt = Hlmt(
        "MR31",
        "Logging in twice with the same credentials yields equivalent responses",
        "a user is registered with POST /user and logs in once with GET /user/login.",
        "the same user logs in again with identical credentials.",
        "both logins succeed and report the same rate limit.",
    )
    creds = {"username": "alice", "password": "s3cret"}
    plan = _plan(
        hlmt,
        given=[
            {"method": "POST", "path": "/user", "body": {"id": 7, "email": "alice@example.com", **creds}},
            {"method": "GET", "path": "/user/login", "query": creds,
             "extract": {"first_limit": "@headers/X-Rate-Limit"}},
        ],
        when=[
            {"method": "GET", "path": "/user/login", "query": creds,
             "extract": {"second_limit": "@headers/X-Rate-Limit"}},
        ],
        assertions=[{"kind": "equality", "left": "${second_limit}", "right": "${first_limit}"}],
    )
    return CannedScenario("repeat-login", INVALID_EXPIRES_HEADER, "response-contract", hlmt, plan)


def _repeated_get() -> CannedScenario:
    hlmt = Hlmt(
        "MR12",
        "Fetching the same pet twice returns the same representation",
        "a pet is created with POST /pet and fetched once with GET /pet/{petId}.",
        "the same pet is fetched a second time without any change in between.",
        "the second representation equals the first.",
    )
    pet_path = {"petId": "${pet_id}"}
    plan = _plan(
        hlmt,
        given=[
            {"method": "POST", "path": "/pet", "body": {"name": "rex", "photoUrls": []}, "extract": {"pet_id": "id"}},
            {"method": "GET", "path": "/pet/{petId}", "path_args": pet_path, "extract": {"first": ""}},
        ],
        when=[{"method": "GET", "path": "/pet/{petId}", "path_args": pet_path, "extract": {"second": ""}}],
        assertions=[{"kind": "equality", "left": "${second}", "right": "${first}"}],
    )
    return CannedScenario("repeated-get", CRASH_ON_SEQUENCE, "server-crash", hlmt, plan)


def _nameless_pet() -> CannedScenario:
    hlmt = Hlmt(
        "MR40",
        "A pet created without a name is retrievable exactly as stored",
        "a pet with photo URLs and a status but no name is created with POST /pet.",
        "the created pet is fetched with GET /pet/{petId}.",
        "the fetched pet equals the creation response.",
    )
    plan = _plan(
        hlmt,
        given=[
            {"method": "POST", "path": "/pet", "body": {"photoUrls": ["u1"], "status": "pending"},
             "extract": {"pet_id": "id", "created": ""}},
        ],
        when=[{"method": "GET", "path": "/pet/{petId}", "path_args": {"petId": "${pet_id}"},
               "extract": {"fetched": ""}}],
        assertions=[{"kind": "equality", "left": "${fetched}", "right": "${created}"}],
    )
    return CannedScenario("nameless-pet", REJECT_MISSING_FIELD, "request-contract", hlmt, plan)


def _delete_then_get() -> CannedScenario:
    hlmt = Hlmt(
        "MR18",
        "Deleting a pet changes the outcome of retrieving it",
        "a pet is created with POST /pet and fetched with GET /pet/{petId}, recording the status code.",
        "the pet is removed with DELETE /pet/{petId} and fetched again.",
        "the second status code differs from the first.",
    )
    pet_path = {"petId": "${pet_id}"}
    plan = _plan(
        hlmt,
        given=[
            {"method": "POST", "path": "/pet", "body": {"name": "tom", "photoUrls": []}, "extract": {"pet_id": "id"}},
            {"method": "GET", "path": "/pet/{petId}", "path_args": pet_path, "extract": {"before": "@status"}},
        ],
        when=[
            {"method": "DELETE", "path": "/pet/{petId}", "path_args": pet_path},
            {"method": "GET", "path": "/pet/{petId}", "path_args": pet_path, "expect_success": False,
             "extract": {"after": "@status"}},
        ],
        assertions=[{"kind": "difference", "left": "${after}", "right": "${before}"}],
    )
    return CannedScenario("delete-then-get", SLOW_ENDPOINT, "timeout", hlmt, plan)


def canned_scenarios() -> list[CannedScenario]:
    return [_status_update(), _repeat_login(), _repeated_get(), _nameless_pet(), _delete_then_get()]


def scenario(name: str) -> CannedScenario:
    for s in canned_scenarios():
        if s.name == name:
            return s
    raise KeyError(name)


# -- scripted response layout -------------------------------------------------


def _hlmt_array(hlmts: Iterable[Hlmt]) -> str:
    return json.dumps([h.to_dict() for h in hlmts], indent=2) + "\n"


def iteration_responses(
    scenarios: Sequence[CannedScenario], *, plan_overrides: dict[str, Sequence[str]] | None = None
) -> list[tuple[str, str]]:
    """(tag, text) pairs for one iteration: generator, refiner, then one plan per HLMT.

    ``plan_overrides`` maps an HLMT id to the raw outputs to emit instead of
    its plan (useful for driving the repair loop).
    """
    hlmts = [s.hlmt for s in scenarios]
    out = [("mr_generate", _hlmt_array(hlmts)), ("mr_refine", _hlmt_array(hlmts))]
    for s in scenarios:
        override = (plan_overrides or {}).get(s.hlmt.id)
        if override is None:
            out.append(("emt_generate", s.plan.to_json()))
            continue
        for i, text in enumerate(override):
            out.append(("emt_generate" if i == 0 else "emt_repair", text))
    return out


def write_script_dir(directory: str | Path, responses: Iterable[tuple[str, str]]) -> Path:
    """Write numbered response files (``001_mr_generate.txt`` ...) for the scripted client."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for n, (tag, text) in enumerate(responses, start=1):
        (directory / f"{n:03d}_{tag}.txt").write_text(text, encoding="utf-8")
    return directory
