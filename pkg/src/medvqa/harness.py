"""Dataset loading, strict scoring, benchmark execution, report generation.

Closed questions score 1 only when the first yes/no-type word (or option
label) of the response matches the ground truth; a response containing both
words is pinned to whichever comes first, which kills the usual long-answer
inflation. Open questions score the fraction of unique ground-truth tokens
present in the response.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .core import QuestionKind, RunConfig, Sample
from .fewshot import CandidateExample
from .gateway import BackendSet
from .knowledge import KnowledgeGraph
from .orchestrator import PromptLibrary, StopReason, Trace, run_sample, write_trace
from .textnorm import first_option_label, first_yes_no, tokenize

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Dataset failed validation; names the record or id at fault."""


@dataclass(frozen=True)
class Dataset:
    name: str
    samples: tuple[Sample, ...]
    icl_pool_path: Optional[str] = None


_KINDS = {
    "closed": QuestionKind.CLOSED,
    "open": QuestionKind.OPEN,
    "multichoice": QuestionKind.MULTICHOICE,
}


def load_dataset(path: str | Path) -> Dataset:
    """Load a line-delimited dataset: one JSON record per line with fields
    id, image, question, kind, optional ground_truth, options for
    multichoice."""
    path = Path(path)
    samples = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        for required in ("id", "image", "question", "kind"):
            if required not in doc:
                raise DatasetError(f"{path}:{lineno}: missing field {required!r}")
        kind_raw = str(doc["kind"]).lower()
        if kind_raw not in _KINDS:
            raise DatasetError(f"{path}:{lineno}: unknown kind {doc['kind']!r}")
        sample_id = str(doc["id"])
        if sample_id in seen_ids:
            raise DatasetError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
        seen_ids.add(sample_id)
        try:
            samples.append(Sample(
                id=sample_id,
                image=str(doc["image"]),
                question=str(doc["question"]),
                kind=_KINDS[kind_raw],
                ground_truth=doc.get("ground_truth"),
                options=tuple(doc.get("options", [])),
            ))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return Dataset(name=path.stem, samples=tuple(samples))


def normalize_ground_truth(
    ground_truth: str,
    options: Sequence[str] = (),
    lexicon: Optional[dict[str, str]] = None,
) -> str:
    """Reduce a closed ground truth to "Yes"/"No" or an option label."""
    if options:
        label = first_option_label(ground_truth, options)
        if label is None:
            raise DatasetError(f"ground truth {ground_truth!r} matches no option")
        return label
    verdict = first_yes_no(ground_truth, lexicon)
    if verdict is None:
        raise DatasetError(f"ground truth {ground_truth!r} is not a yes/no answer")
    return verdict


def score_closed(
    response: str,
    ground_truth: str,
    options: Sequence[str] = (),
    lexicon: Optional[dict[str, str]] = None,
) -> int:
    """1 iff the first yes/no-type word (or option label) in the response
    matches the normalized ground truth; 0 when none is present."""
    target = normalize_ground_truth(ground_truth, options, lexicon)
    if options:
        prediction = first_option_label(response, options)
    else:
        prediction = first_yes_no(response, lexicon)
    return int(prediction == target)


def score_open(response: str, ground_truth: str) -> float:
    """Recall of unique ground-truth tokens in the response token set."""
    gt_tokens = set(tokenize(ground_truth))
    if not gt_tokens:
        raise DatasetError(f"ground truth {ground_truth!r} has no tokens")
    response_tokens = set(tokenize(response))
    return len(gt_tokens & response_tokens) / len(gt_tokens)


@dataclass(frozen=True)
class SampleRow:
    id: str
    kind: QuestionKind
    score: float
    iterations: int
    stop_reason: Optional[StopReason]


@dataclass
class MetricReport:
    dataset: str
    n_samples: int
    n_failed: int
    closed_accuracy: Optional[float]
    open_recall: Optional[float]
    per_kind: dict[str, int]
    mean_iterations: float
    stop_reasons: dict[str, int]
    rows: list[SampleRow] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)


def _mean(values: list[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def build_report(dataset_name: str, rows: list[SampleRow],
                 failures: list[tuple[str, str]]) -> MetricReport:
    closed_scores = [r.score for r in rows
                     if r.kind in (QuestionKind.CLOSED, QuestionKind.MULTICHOICE)]
    open_scores = [r.score for r in rows if r.kind is QuestionKind.OPEN]
    per_kind: dict[str, int] = {}
    stop_reasons: dict[str, int] = {}
    for row in rows:
        per_kind[row.kind.value] = per_kind.get(row.kind.value, 0) + 1
        if row.stop_reason is not None:
            stop_reasons[row.stop_reason.value] = stop_reasons.get(row.stop_reason.value, 0) + 1
    return MetricReport(
        dataset=dataset_name,
        n_samples=len(rows),
        n_failed=len(failures),
        closed_accuracy=_mean(closed_scores),
        open_recall=_mean(open_scores),
        per_kind=per_kind,
        mean_iterations=(sum(r.iterations for r in rows) / len(rows)) if rows else 0.0,
        stop_reasons=stop_reasons,
        rows=rows,
        failures=failures,
    )


def validate_report(report: MetricReport) -> None:
    """Self-consistency: aggregates must equal recomputation from the rows."""
    recomputed = build_report(report.dataset, report.rows, report.failures)
    for attr in ("n_samples", "n_failed", "closed_accuracy", "open_recall",
                 "per_kind", "mean_iterations", "stop_reasons"):
        if getattr(report, attr) != getattr(recomputed, attr):
            raise ValueError(f"report aggregate {attr} does not match its rows")


def score_trace(sample: Sample, trace: Trace,
                lexicon: Optional[dict[str, str]] = None) -> float:
    if sample.ground_truth is None:
        raise DatasetError(f"sample {sample.id!r}: missing ground truth, cannot score")
    if sample.kind is QuestionKind.OPEN:
        return score_open(trace.final_answer, sample.ground_truth)
    return float(score_closed(trace.final_answer, sample.ground_truth,
                              options=sample.options, lexicon=lexicon))


def run_benchmark(
    dataset: Dataset,
    config: RunConfig,
    backends: BackendSet,
    graph: Optional[KnowledgeGraph] = None,
    pool: Optional[list[CandidateExample]] = None,
    out_dir: Optional[str | Path] = None,
    prompts: Optional[PromptLibrary] = None,
) -> MetricReport:
    """Run every sample, score it per its kind, aggregate.

    Samples run under a bounded worker pool (scripted backends force a single
    worker because transcript order matters); aggregation always happens in
    dataset order, so worker count never changes the report. Failed samples
    are recorded and excluded from metric denominators.
    """
    if not dataset.samples:
        raise DatasetError("empty dataset")
    prompts = prompts or PromptLibrary.load(config.prompts_dir or None)
    from . import textnorm

    lexicon = textnorm.load_lexicon(config.lexicon_path) if config.lexicon_path else None

    workers = 1 if backends.any_scripted else config.workers
    if workers != config.workers:
        logger.info("scripted backends in use; forcing workers=1")

    def run_one(sample: Sample) -> Trace:
        return run_sample(sample, config, backends, graph=graph, pool=pool, prompts=prompts)

    if workers == 1:
        traces = [run_one(s) for s in dataset.samples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            traces = list(pool_exec.map(run_one, dataset.samples))

    rows: list[SampleRow] = []
    failures: list[tuple[str, str]] = []
    for sample, trace in zip(dataset.samples, traces):
        if out_dir is not None:
            write_trace(trace, out_dir)
        if trace.failed:
            failures.append((sample.id, trace.error))
            continue
        try:
            score = score_trace(sample, trace, lexicon)
        except DatasetError as exc:
            logger.error("sample %s: %s", sample.id, exc)
            failures.append((sample.id, str(exc)))
            continue
        rows.append(SampleRow(
            id=sample.id,
            kind=sample.kind,
            score=score,
            iterations=len(trace.iterations),
            stop_reason=trace.stop_reason,
        ))

    report = build_report(dataset.name, rows, failures)
    validate_report(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report_to_json(report), encoding="utf-8")
        (out_dir / "report.md").write_text(report_to_markdown(report), encoding="utf-8")
    return report


def serialize_report(report: MetricReport) -> dict:
    return {
        "format": "medvqa-report",
        "version": 1,
        "dataset": report.dataset,
        "n_samples": report.n_samples,
        "n_failed": report.n_failed,
        "closed_accuracy": report.closed_accuracy,
        "open_recall": report.open_recall,
        "per_kind": dict(sorted(report.per_kind.items())),
        "mean_iterations": report.mean_iterations,
        "stop_reasons": dict(sorted(report.stop_reasons.items())),
        "rows": [
            {
                "id": row.id,
                "kind": row.kind.value,
                "score": row.score,
                "iterations": row.iterations,
                "stop_reason": row.stop_reason.value if row.stop_reason else None,
            }
            for row in report.rows
        ],
        "failures": [{"id": sid, "error": err} for sid, err in report.failures],
    }


def report_to_json(report: MetricReport) -> str:
    return json.dumps(serialize_report(report), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _pct(value: Optional[float]) -> str:
    return f"{100 * value:.2f}" if value is not None else "-"


def report_to_markdown(report: MetricReport) -> str:
    lines = [
        f"# Benchmark report: {report.dataset}",
        "",
        "| Dataset | N | Open | Closed | Mean iterations |",
        "| --- | --- | --- | --- | --- |",
        f"| {report.dataset} | {report.n_samples} | {_pct(report.open_recall)} "
        f"| {_pct(report.closed_accuracy)} | {report.mean_iterations:.2f} |",
        "",
        "Stop reasons: " + (", ".join(
            f"{k}={v}" for k, v in sorted(report.stop_reasons.items())) or "none"),
        f"Failed samples: {report.n_failed}",
        "",
        "| Sample | Kind | Score | Iterations | Stop reason |",
        "| --- | --- | --- | --- | --- |",
    ]
    for row in report.rows:
        stop = row.stop_reason.value if row.stop_reason else "-"
        lines.append(
            f"| {row.id} | {row.kind.value} | {row.score:.4f} | {row.iterations} | {stop} |"
        )
    for sid, err in report.failures:
        lines.append(f"| {sid} | failed | - | - | {err} |")
    return "\n".join(lines) + "\n"
