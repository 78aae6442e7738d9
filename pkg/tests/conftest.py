"""Shared fixtures: in-memory scripts, deterministic fake backends, config factories."""

from __future__ import annotations

import zlib
from pathlib import Path

import pytest

from medvqa.core import QuestionKind, RunConfig, Sample
from medvqa.gateway import (
    BackendSet,
    ChatRequest,
    FixtureEmbedder,
    ScriptRecord,
    ScriptedBackend,
    ScriptedScript,
)

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES = REPO_ROOT / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"


def make_sample(
    sample_id: str = "s1",
    kind: QuestionKind = QuestionKind.CLOSED,
    question: str = "Is the lung normal?",
    ground_truth: str | None = "No",
    options: tuple[str, ...] = (),
) -> Sample:
    return Sample(
        id=sample_id,
        image=f"images/{sample_id}.png",
        question=question,
        kind=kind,
        ground_truth=ground_truth,
        options=options,
    )


def make_config(**overrides) -> RunConfig:
    config = RunConfig(k_shot=0)
    for key, value in overrides.items():
        setattr(config, key, value)
    config.validate()
    return config


def script_backends(records: list[ScriptRecord], embed_table: dict | None = None) -> BackendSet:
    """BackendSet where all chat roles share one in-memory script."""
    script = ScriptedScript(list(records))
    embedder = FixtureEmbedder(embed_table) if embed_table else None
    return BackendSet(
        perceiver=ScriptedBackend(script, "perceiver"),
        reasoner=ScriptedBackend(script, "reasoner"),
        evaluator=ScriptedBackend(script, "evaluator"),
        explorer=ScriptedBackend(script, "explorer"),
        retriever=ScriptedBackend(script, "retriever"),
        text_embedder=embedder,
        image_embedder=embedder,
        scripts={"<memory>": script},
    )


def loop_records(
    scores: list[int],
    threshold: int,
    max_iterations: int,
    fixed_iterations: int = -1,
    answer: str = "No",
) -> list[ScriptRecord]:
    """Build the exact script a run will consume for a given evaluator score
    sequence. Generating no spare records makes over-consumption fail loudly."""
    adaptive = fixed_iterations < 0
    if adaptive:
        executed = max_iterations
        for index, score in enumerate(scores[: max_iterations + 1]):
            if score >= threshold:
                executed = min(index, max_iterations)
                break
    else:
        executed = fixed_iterations

    records = [
        ScriptRecord("perceiver", "A frontal chest radiograph."),
        ScriptRecord("perceiver", f"Initial read: {answer.lower()}."),
        ScriptRecord("reasoner", f"Analysis: initial pass.\n\nAnswer: {answer}"),
    ]
    if adaptive:
        records.append(ScriptRecord("evaluator", f"Score: {scores[0]}\nExplanation: pass 0"))
    for t in range(1, executed + 1):
        records.append(ScriptRecord(
            "explorer", "Sub-question 1: What is the overall appearance of the image?"
        ))
        records.append(ScriptRecord("perceiver", f"Sub answer for pass {t}."))
        records.append(ScriptRecord(
            "reasoner", f"Analysis: refinement pass {t}.\n\nAnswer: {answer} (pass {t})"
        ))
        if adaptive:
            records.append(ScriptRecord("evaluator", f"Score: {scores[t]}\nExplanation: pass {t}"))
    return records


def expected_iterations(scores: list[int], threshold: int, max_iterations: int) -> int:
    for index, score in enumerate(scores[: max_iterations + 1]):
        if score >= threshold:
            return min(index, max_iterations)
    return max_iterations


class PureBackend:
    """Deterministic function of the prompt text alone: safe under any worker
    count because responses never depend on call order."""

    model_id = "pure"

    def __init__(self, role: str) -> None:
        self.role = role

    def complete(self, request: ChatRequest) -> str:
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        digest = zlib.crc32(request.prompt_text().encode("utf-8"))
        if self.role == "perceiver":
            return f"Deterministic description {digest % 1000}.", False
        if self.role == "reasoner":
            verdict = "Yes" if digest % 2 else "No"
            return f"Analysis: hash {digest}.\n\nAnswer: {verdict}", False
        if self.role == "evaluator":
            return f"Score: {1 + digest % 5}\nExplanation: hash {digest}", False
        if self.role == "explorer":
            return "Sub-question 1: What stands out?", False
        return f"- concept {digest % 7}", False


def pure_backends() -> BackendSet:
    return BackendSet(
        perceiver=PureBackend("perceiver"),
        reasoner=PureBackend("reasoner"),
        evaluator=PureBackend("evaluator"),
        explorer=PureBackend("explorer"),
        retriever=PureBackend("retriever"),
    )


@pytest.fixture
def case_study_paths() -> dict[str, Path]:
    return {
        "transcript": FIXTURES / "case_study.transcript.jsonl",
        "sample": FIXTURES / "case_study.sample.json",
        "config": FIXTURES / "case_study.toml",
        "kg": FIXTURES / "toy_kg.tsv",
    }
