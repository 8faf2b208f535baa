"""Command-line entry point: ``restmeta run | validate-spec | replay | diff-seq``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

import requests
import yaml

from .errors import FatalConfigError, RestMetaError, SchemaViolation, UnparseableDocument, UnsupportedVersion
from .executor import Executor, format_sequence
from .llm import client_from_spec
from .reporting import diff_sequences, load_plans, load_sequence_file, persist_session, sorted_sequences, write_results
from .session import SessionConfig, parse_duration, run_session
from .specmodel import ApiSpecification, bundled_spec_path, load_spec

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_CONFIG = 2
EXIT_ARTIFACTS = 3

SPEC_ERRORS = (UnparseableDocument, UnsupportedVersion, SchemaViolation)

log = logging.getLogger("restmeta")


def _headers(values: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in values or ():
        name, sep, value = item.partition(":")
        if not sep or not name.strip():
            raise FatalConfigError(f"--header expects 'Name: value', got {item!r}")
        out[name.strip()] = value.strip()
    return out


def _load_spec(path: str) -> ApiSpecification:
    p = Path(path)
    if not p.exists() and path != "-":
        try:
            p = bundled_spec_path(path)
        except (KeyError, FileNotFoundError):
            raise UnparseableDocument(f"{path}: no such file") from None
    try:
        return load_spec(str(p) if path != "-" else "-")
    except OSError as exc:
        raise UnparseableDocument(f"{path}: {exc}") from exc


def build_config(args: argparse.Namespace) -> SessionConfig:
    """Defaults, then the config file, then flags."""
    data: dict[str, Any] = {}
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise FatalConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise FatalConfigError(f"config {args.config} must be a mapping")
        data.update(loaded)
    flag_map = {
        "coverage_target": "target_coverage",
        "plateau": "plateau_window",
        "request_budget": "request_budget",
        "batch": "batch_bound",
        "repair_attempts": "repair_max_attempts",
        "timeout": "per_request_timeout",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    if args.time_budget is not None:
        data["time_budget"] = parse_duration(args.time_budget)
    agent_overrides = {k: v for k, v in (("model_id", args.model), ("temperature", args.temperature),
                                         ("seed", args.seed)) if v is not None}
    config = SessionConfig.from_dict(data)
    if agent_overrides:
        for role, agent in list(config.agent_configs.items()):
            merged = {**vars(agent), **agent_overrides}
            merged.pop("role_name")
            config.agent_configs[role] = type(agent)(role, **merged)
    return config.validate()


def _reset_hook(url: str | None):
    if not url:
        return None

    def reset(_plan) -> None:
        try:
            requests.post(url, timeout=10)
        except requests.RequestException as exc:
            log.warning("reset request to %s failed: %s", url, exc)

    return reset


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    headers = _headers(args.header)
    spec = _load_spec(args.spec)
    base_url = args.base_url or spec.base_url
    if not base_url:
        raise FatalConfigError("no --base-url given and the API document declares no absolute server URL")
    client = client_from_spec(args.llm, args.llm_endpoint)
    report = run_session(
        spec,
        base_url,
        config,
        client,
        session_id=args.session_id,
        static_headers=headers,
        templates_dir=args.templates,
        before_scenario=_reset_hook(args.reset_url),
    )
    persist_session(report, args.out)
    t = report.totals
    print(f"session {report.session_id}: stop reason {report.stop_reason}")
    print(
        f"iterations {len(report.iterations)}, HLMTs {t.hlmt_count}, EMTs {t.emt_count}, "
        f"passed {t.passed}, failed {t.failed}, coverage {t.coverage_percent:.2f}%, "
        f"requests {report.requests_spent}"
    )
    print(f"artifacts in {Path(args.out) / report.session_id}")
    if args.fail_on_findings and t.failed:
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_validate_spec(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec)
    print(f"{spec.title} {spec.version} ({spec.dialect}): {len(spec)} operations")
    for op in spec.operations:
        print(f"  {op}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    session_dir = Path(args.session_dir)
    plans = load_plans(session_dir) if (session_dir / "plans").is_dir() else []
    if not plans:
        print(f"error: no stored plans under {session_dir / 'plans'}", file=sys.stderr)
        return EXIT_ARTIFACTS
    spec = _load_spec(args.spec)
    base_url = args.base_url or spec.base_url
    if not base_url:
        raise FatalConfigError("replay needs --base-url")
    timeout = args.timeout if args.timeout is not None else SessionConfig().per_request_timeout
    budget = args.request_budget if args.request_budget is not None else SessionConfig().request_budget
    executor = Executor(spec, base_url, timeout, _headers(args.header))
    reset = _reset_hook(args.reset_url)
    results = []
    spent = 0
    for iteration, plan in plans:
        if reset and not plan.placeholder:
            reset(plan)
        result = executor.execute(plan, max(budget - spent, 0), iteration)
        spent += result.requests_spent
        results.append(result)
    out = Path(args.results) if args.results else session_dir / "replay" / "results.jsonl"
    write_results(results, out)
    counts = Counter(r.verdict for r in results)
    print(", ".join(f"{k} {v}" for k, v in sorted(counts.items())) + f" ({spent} requests)")
    for r in results:
        if not r.passed:
            kind = r.failure_class.kind if r.failure_class else "?"
            print(f"  {r.hlmt_id}: {r.verdict} [{kind}]")
    print(f"results in {out}")
    if args.fail_on_findings and any(not r.passed for r in results):
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_diff_seq(args: argparse.Namespace) -> int:
    try:
        ours = load_sequence_file(args.ours)
        baseline = load_sequence_file(args.baseline)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACTS
    distinct = sorted_sequences(diff_sequences(ours, baseline))
    for seq in distinct:
        print(format_sequence(seq))
    print(f"distinct: {len(distinct)} of {len(ours)}", file=sys.stderr)
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML session config; flags override it")
    p.add_argument("--out", default="restmeta-out", help="output directory (default: %(default)s)")
    p.add_argument("--session-id", help="defaults to a UTC timestamp")
    p.add_argument("--llm", default="http", help="scripted:<dir> or http (default: %(default)s)")
    p.add_argument("--llm-endpoint", help="chat-completions URL for --llm http")
    p.add_argument("--model", help="model id for every agent")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int, help="max HLMTs per iteration")
    p.add_argument("--coverage-target", type=float, help="percent, default 100")
    p.add_argument("--plateau", type=int, help="plateau window in iterations, default 5")
    p.add_argument("--request-budget", type=int, help="default 1000")
    p.add_argument("--time-budget", help="e.g. 1800, 30m, 0.5h; default 30m")
    p.add_argument("--repair-attempts", type=int, help="default 2")
    p.add_argument("--timeout", type=float, help="per-request timeout in seconds, default 10")
    p.add_argument("--templates", help="directory overriding the packaged prompt templates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restmeta", description="LLM-driven metamorphic testing of REST APIs")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a test generation session")
    run.add_argument("--spec", required=True, help="OpenAPI/Swagger file, '-' for stdin, or a bundled name")
    run.add_argument("--base-url", help="service root URL")
    _add_run_flags(run)
    run.add_argument("--header", action="append", help="static header 'Name: value' (repeatable)")
    run.add_argument("--reset-url", help="POSTed before every scenario (test fixtures)")
    run.add_argument("--fail-on-findings", action="store_true", help="exit 1 when any test failed")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate-spec", help="parse a spec and list its operations")
    val.add_argument("--spec", required=True)
    val.set_defaults(func=cmd_validate_spec)

    rep = sub.add_parser("replay", help="re-execute stored plans without any model calls")
    rep.add_argument("session_dir")
    rep.add_argument("--spec", required=True)
    rep.add_argument("--base-url")
    rep.add_argument("--timeout", type=float)
    rep.add_argument("--request-budget", type=int)
    rep.add_argument("--header", action="append")
    rep.add_argument("--reset-url")
    rep.add_argument("--results", help="default: <session_dir>/replay/results.jsonl")
    rep.add_argument("--fail-on-findings", action="store_true")
    rep.set_defaults(func=cmd_replay)

    diff = sub.add_parser("diff-seq", help="sequences present in OURS but not in BASELINE")
    diff.add_argument("ours")
    diff.add_argument("baseline")
    diff.set_defaults(func=cmd_diff_seq)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FatalConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SPEC_ERRORS as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACTS
    except RestMetaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACTS


if __name__ == "__main__":
    sys.exit(main())
