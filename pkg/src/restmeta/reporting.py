"""Session metrics, report assembly and artifact persistence."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .executor import OpSequence, ScenarioResult, format_sequence, parse_sequence, sequence_to_list
from .mtmodel import Hlmt, SemanticGroup, group_semantic
from .plan import EmtPlan

UNLABELED = "unlabeled"
TRUE_POSITIVE_LABELS = {"tpft", "tp", "true-positive", "fault"}
FALSE_POSITIVE_LABELS = {"fpft", "fp", "false-positive"}


@dataclass(frozen=True)
class MetricsRow:
    hlmt_count: int = 0
    emt_count: int = 0
    passed: int = 0
    failed: int = 0
    coverage_percent: float = 0.0
    elapsed: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "hlmt_count": self.hlmt_count,
            "emt_count": self.emt_count,
            "passed": self.passed,
            "failed": self.failed,
            "coverage_percent": round(self.coverage_percent, 2),
            "elapsed_s": round(self.elapsed, 3),
        }


@dataclass(frozen=True)
class IterationSummary:
    iteration_index: int
    metrics: MetricsRow
    placeholders: int = 0
    failure_classes: Mapping[str, int] = field(default_factory=dict)
    requests_spent: int = 0
    new_slugs: int = 0
    plateau_counter: int = 0
    repair_attempts: int = 0
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration_index,
            "metrics": self.metrics.to_dict(),
            "placeholders": self.placeholders,
            "failure_classes": dict(sorted(self.failure_classes.items())),
            "requests_spent": self.requests_spent,
            "new_slugs": self.new_slugs,
            "plateau_counter": self.plateau_counter,
            "repair_attempts": self.repair_attempts,
            "diagnostics": list(self.diagnostics),
        }


def summarize_iteration(
    results: Sequence[ScenarioResult],
    hlmts: Sequence[Hlmt],
    iteration_index: int = 1,
    coverage_percent: float = 0.0,
    elapsed: float = 0.0,
) -> IterationSummary:
    """Per-verdict and per-class counts; placeholder scenarios are not EMTs."""
    executed = [r for r in results if not r.placeholder]
    passed = sum(1 for r in executed if r.passed)
    classes = Counter(r.failure_class.kind for r in results if r.failure_class is not None)
    return IterationSummary(
        iteration_index=iteration_index,
        metrics=MetricsRow(len(hlmts), len(executed), passed, len(executed) - passed, coverage_percent, elapsed),
        placeholders=len(results) - len(executed),
        failure_classes=dict(classes),
        requests_spent=sum(r.requests_spent for r in results),
    )


def total_metrics(summaries: Iterable[IterationSummary], coverage_percent: float | None = None,
                  elapsed: float | None = None) -> MetricsRow:
    summaries = list(summaries)
    rows = [s.metrics for s in summaries]
    return MetricsRow(
        hlmt_count=sum(r.hlmt_count for r in rows),
        emt_count=sum(r.emt_count for r in rows),
        passed=sum(r.passed for r in rows),
        failed=sum(r.failed for r in rows),
        coverage_percent=coverage_percent if coverage_percent is not None else (rows[-1].coverage_percent if rows else 0.0),
        elapsed=elapsed if elapsed is not None else sum(r.elapsed for r in rows),
    )


def diff_sequences(ours: Iterable[OpSequence], baseline: Iterable[OpSequence]) -> set[OpSequence]:
    return set(ours) - set(baseline)


def sorted_sequences(seqs: Iterable[OpSequence]) -> list[OpSequence]:
    return sorted(set(seqs), key=format_sequence)


def load_sequence_file(path: str | Path) -> set[OpSequence]:
    """A JSON array of sequences, or a report.json carrying a ``sequences`` field."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, Mapping):
        data = data.get("sequences")
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON array of sequences")
    return {parse_sequence(item) for item in data}


@dataclass
class ScenarioRecord:
    hlmt: Hlmt
    plan: EmtPlan
    result: ScenarioResult


@dataclass
class SessionReport:
    session_id: str
    config_snapshot: dict[str, Any]
    iterations: list[IterationSummary]
    totals: MetricsRow
    semantic_groups: list[SemanticGroup]
    sequences: set[OpSequence]
    failed_sequences: set[OpSequence]
    stop_reason: str
    api: dict[str, Any] = field(default_factory=dict)
    coverage_trajectory: list[dict[str, Any]] = field(default_factory=list)
    covered_operations: list[str] = field(default_factory=list)
    uncovered_operations: list[str] = field(default_factory=list)
    requests_spent: int = 0
    plateau_rule: str = ""
    tpft: int | None = None
    tpr: float | str = UNLABELED
    artifacts_manifest: list[str] = field(default_factory=list)
    scenarios: list[list[ScenarioRecord]] = field(default_factory=list, repr=False)

    def results(self) -> list[ScenarioResult]:
        return [rec.result for batch in self.scenarios for rec in batch]

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "api": self.api,
            "config": self.config_snapshot,
            "stop_reason": self.stop_reason,
            "plateau_rule": self.plateau_rule,
            "iterations": [s.to_dict() for s in self.iterations],
            "totals": self.totals.to_dict(),
            "requests_spent": self.requests_spent,
            "tpft": self.tpft,
            "tpr": self.tpr if isinstance(self.tpr, str) else round(self.tpr, 2),
            "coverage_trajectory": self.coverage_trajectory,
            "covered_operations": self.covered_operations,
            "uncovered_operations": self.uncovered_operations,
            "semantic_groups": [
                {"slug": g.slug, "members": [list(m) for m in g.member_refs]} for g in self.semantic_groups
            ],
            "semantically_unique": len(self.semantic_groups),
            "sequences": [sequence_to_list(s) for s in sorted_sequences(self.sequences)],
            "failed_sequences": [sequence_to_list(s) for s in sorted_sequences(self.failed_sequences)],
            "artifacts_manifest": self.artifacts_manifest,
        }


def build_report(session_id: str, spec, config, state, stop_reason: str, elapsed: float) -> SessionReport:
    from .session import PLATEAU_RULE

    summaries = []
    trajectory = []
    batches: list[list[ScenarioRecord]] = []
    for rec in state.iteration_summaries:
        s = summarize_iteration(rec.results, rec.hlmts, rec.index, rec.coverage_percent, rec.elapsed)
        s = replace(
            s,
            new_slugs=rec.new_slugs,
            plateau_counter=rec.plateau_counter,
            repair_attempts=rec.repair_attempts,
            diagnostics=tuple(str(d) for d in rec.diagnostics),
        )
        summaries.append(s)
        trajectory.append(
            {
                "iteration": rec.index,
                "coverage_percent": round(rec.coverage_percent, 2),
                "covered": len(rec.covered),
                "covered_operations": sorted(f"{m} {p}" for m, p in rec.covered),
            }
        )
        batches.append([ScenarioRecord(h, p, r) for h, p, r in zip(rec.hlmts, rec.plans, rec.results)])

    results = [r for batch in batches for r in (rec.result for rec in batch)]
    executed = [r for r in results if not r.placeholder and r.sequence]
    all_ops = sorted(f"{op.http_method} {op.path_template}" for op in spec.operations)
    covered = sorted(f"{m} {p}" for m, p in state.covered_operations)
    return SessionReport(
        session_id=session_id,
        config_snapshot=config.to_dict(),
        iterations=summaries,
        totals=total_metrics(summaries, state.coverage_percent, elapsed),
        semantic_groups=group_semantic(state.all_hlmts, session_id),
        sequences={r.sequence for r in executed},
        failed_sequences={r.sequence for r in executed if not r.passed},
        stop_reason=stop_reason,
        api={"title": spec.title, "version": spec.version, "operations": len(spec.operations)},
        coverage_trajectory=trajectory,
        covered_operations=covered,
        uncovered_operations=[op for op in all_ops if op not in set(covered)],
        requests_spent=state.requests_spent,
        plateau_rule=PLATEAU_RULE,
        scenarios=batches,
    )


# -- manual annotations ------------------------------------------------------


def _annotation_for(result: ScenarioResult, annotations: Mapping[str, str]) -> str | None:
    return annotations.get(f"{result.iteration_index}:{result.hlmt_id}", annotations.get(result.hlmt_id))


def apply_annotations(report: SessionReport, annotations: Mapping[str, str]) -> SessionReport:
    """Join manual TPFT/FPFT labels (keyed ``"<iteration>:<hlmt id>"`` or ``"<hlmt id>"``)."""
    tp = labelled = 0
    for batch in report.scenarios:
        for rec in batch:
            label = _annotation_for(rec.result, annotations)
            rec.result = replace(rec.result, annotation=label)
            if label is None or rec.result.passed or rec.result.placeholder:
                continue
            key = label.strip().lower()
            if key in TRUE_POSITIVE_LABELS:
                tp += 1
                labelled += 1
            elif key in FALSE_POSITIVE_LABELS:
                labelled += 1
    if labelled:
        report.tpft = tp
        report.tpr = tp / labelled * 100.0
    else:
        report.tpft = None
        report.tpr = UNLABELED
    return report


# -- persistence -------------------------------------------------------------


def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "hlmt"


def plan_filename(iteration: int, position: int, hlmt_id: str) -> str:
    return f"plans/iter{iteration:02d}_{position:03d}_{_safe(hlmt_id)}.json"


def render_markdown(report: SessionReport) -> str:
    t = report.totals
    lines = [
        f"# Session {report.session_id}",
        "",
        f"API: {report.api.get('title', '')} {report.api.get('version', '')} "
        f"({report.api.get('operations', 0)} operations)",
        f"Stop reason: {report.stop_reason}",
        f"Requests spent: {report.requests_spent}",
        "",
        "## Iterations",
        "",
        "| Iter. | HLMTs | EMTs | Passed | Failed | Placeholders | Coverage | Time (s) |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for s in report.iterations:
        m = s.metrics
        lines.append(
            f"| {s.iteration_index} | {m.hlmt_count} | {m.emt_count} | {m.passed} | {m.failed} | "
            f"{s.placeholders} | {m.coverage_percent:.2f}% | {m.elapsed:.2f} |"
        )
    placeholders = sum(s.placeholders for s in report.iterations)
    lines.append(
        f"| **Total** | {t.hlmt_count} | {t.emt_count} | {t.passed} | {t.failed} | {placeholders} | "
        f"{t.coverage_percent:.2f}% | {t.elapsed:.2f} |"
    )
    tpr = report.tpr if isinstance(report.tpr, str) else f"{report.tpr:.1f}"
    tpft = "-" if report.tpft is None else str(report.tpft)
    lines += [
        "",
        "## Findings",
        "",
        "| EMTs | Passed | Failed | TPFT | TPR (%) |",
        "|---|---|---|---|---|",
        f"| {t.emt_count} | {t.passed} | {t.failed} | {tpft} | {tpr} |",
        "",
        "## Failure classes",
        "",
        "| Class | Count |",
        "|---|---|",
    ]
    classes: Counter = Counter()
    for s in report.iterations:
        classes.update(s.failure_classes)
    for kind, count in sorted(classes.items()):
        lines.append(f"| {kind} | {count} |")
    lines += [
        "",
        f"Semantically unique HLMTs: {len(report.semantic_groups)}",
        f"Distinct sequences: {len(report.sequences)} (failed: {len(report.failed_sequences)})",
        "",
    ]
    for seq in sorted_sequences(report.sequences):
        mark = " (failed)" if seq in report.failed_sequences else ""
        lines.append(f"- {format_sequence(seq)}{mark}")
    if report.uncovered_operations:
        lines += ["", "## Uncovered operations", ""]
        lines += [f"- {op}" for op in report.uncovered_operations]
    return "\n".join(lines) + "\n"


def persist_session(report: SessionReport, output_dir: str | Path) -> list[str]:
    """Write the session's artifacts under ``output_dir/<session_id>/``; returns the manifest.

    Output is deterministic for a given report: stable key order and no
    timestamps beyond the recorded fields.
    """
    root = Path(output_dir) / report.session_id
    (root / "plans").mkdir(parents=True, exist_ok=True)
    annotations_file = root / "annotations.json"
    if annotations_file.is_file():
        apply_annotations(report, json.loads(annotations_file.read_text(encoding="utf-8")))
    elif report.tpft is None:
        apply_annotations(report, {})

    files: dict[str, str] = {}
    hlmt_doc = []
    lines = []
    for batch, summary in zip(report.scenarios, report.iterations):
        hlmt_doc.append({"iteration": summary.iteration_index, "hlmts": [rec.hlmt.to_dict() for rec in batch]})
        for position, rec in enumerate(batch):
            name = plan_filename(summary.iteration_index, position, rec.hlmt.id)
            files[name] = rec.plan.to_json()
            entry = rec.result.to_dict()
            entry["plan_file"] = name
            lines.append(json.dumps(entry, sort_keys=True, ensure_ascii=False))
    files["hlmts.json"] = _dump(hlmt_doc)
    files["results.jsonl"] = "\n".join(lines) + ("\n" if lines else "")
    files["coverage.json"] = _dump(
        {
            "total_operations": report.api.get("operations", 0),
            "trajectory": report.coverage_trajectory,
            "covered_operations": report.covered_operations,
            "uncovered_operations": report.uncovered_operations,
        }
    )
    files["report.md"] = render_markdown(report)
    manifest = sorted(list(files) + ["report.json"])
    report.artifacts_manifest = manifest
    files["report.json"] = _dump(report.to_dict())

    for name, content in files.items():
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    return manifest


def load_plans(session_dir: str | Path) -> list[tuple[int, EmtPlan]]:
    """Persisted plans in execution order, with their iteration index."""
    plans = []
    for path in sorted((Path(session_dir) / "plans").glob("iter*.json")):
        m = re.match(r"iter(\d+)_", path.name)
        plans.append((int(m.group(1)) if m else 1, EmtPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))))
    return plans


def write_results(results: Iterable[ScenarioResult], path: str | Path) -> None:
    lines = [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) for r in results]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_results(path: str | Path) -> list[ScenarioResult]:
    text = Path(path).read_text(encoding="utf-8")
    return [ScenarioResult.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
