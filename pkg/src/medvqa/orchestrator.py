"""The adaptive reasoning loop.

Per sample: perceive, reason, evaluate, then refine (decompose + retrieve +
re-reason + re-evaluate) until the confidence threshold is met or the
iteration budget runs out. The pre-loop pass is iteration 0; "max
iterations" bounds refinement passes only. A fixed-iteration ablation mode
bypasses the evaluator entirely and always runs exactly N refinement passes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from . import agents, knowledge, textnorm
from .agents import Confidence, PromptLibrary, ReasonedAnswer, SubQA, SubQuestionLevel
from .core import (
    AgentRole,
    ConfigError,
    ReasoningEntry,
    ReasoningHistory,
    RunConfig,
    Sample,
    derive_seed,
)
from .fewshot import CandidateExample, render_icl_block, select_icl
from .gateway import (
    Backend,
    BackendError,
    BackendSet,
    ChatRequest,
    Embedder,
    OfflineViolationError,
)
from .knowledge import KnowledgeGraph

logger = logging.getLogger(__name__)

ICL_HEADER = "Some similar examples with their answers for reference:"


class HistoryOverflowError(Exception):
    """Rendered history exceeded the configured hard cap."""


class StopReason(str, Enum):
    CONFIDENCE_MET = "confidence_met"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    sub_qas: tuple[SubQA, ...]
    rag_context: str
    reasoned: ReasonedAnswer
    confidence: Optional[Confidence]


@dataclass
class Trace:
    sample_id: str
    caption: str = ""
    initial_answer: str = ""
    initial_reasoned: Optional[ReasonedAnswer] = None
    initial_confidence: Optional[Confidence] = None
    iterations: list[IterationRecord] = field(default_factory=list)
    final_answer: str = ""
    stop_reason: Optional[StopReason] = None
    backend_call_log: list[tuple[str, bool]] = field(default_factory=list)
    failed: bool = False
    error: str = ""


class _LoggedBackend:
    """Tags each chat call with its agent role in the trace's call log."""

    def __init__(self, inner: Backend, role: str, log: list[tuple[str, bool]]) -> None:
        self.inner = inner
        self.role = role
        self.log = log

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    def complete(self, request: ChatRequest) -> str:
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        text, hit = self.inner.complete_with_meta(request)
        self.log.append((self.role, hit))
        return text, hit


class _LoggedEmbedder:
    def __init__(self, inner: Embedder, role: str, log: list[tuple[str, bool]]) -> None:
        self.inner = inner
        self.role = role
        self.log = log

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    @property
    def dim(self) -> int:
        return self.inner.dim

    def _record(self, result: tuple[list[float], bool]) -> list[float]:
        self.log.append((self.role, result[1]))
        return result[0]

    def embed_text(self, text: str) -> list[float]:
        return self._record(self.inner.embed_text_with_meta(text))

    def embed_image(self, image: str) -> list[float]:
        return self._record(self.inner.embed_image_with_meta(image))


def _confidence_entry(confidence: Confidence) -> str:
    return f"Score: {confidence.score}\nExplanation: {confidence.explanation}"


class _SampleRun:
    """Mutable state for one sample's pass through the loop."""

    def __init__(
        self,
        sample: Sample,
        config: RunConfig,
        backends: BackendSet,
        graph: Optional[KnowledgeGraph],
        pool: Optional[list[CandidateExample]],
        prompts: PromptLibrary,
    ) -> None:
        self.sample = sample
        self.config = config
        self.graph = graph
        self.pool = pool
        self.prompts = prompts
        self.lexicon = textnorm.load_lexicon(config.lexicon_path) if config.lexicon_path else None
        self.relation_phrases = knowledge.load_relation_phrases(
            config.relation_phrases_path or None
        )
        self.adaptive = config.fixed_iterations < 0
        self.trace = Trace(sample_id=sample.id)
        log = self.trace.backend_call_log
        self.perceiver = _LoggedBackend(backends.perceiver, "perceiver", log)
        self.reasoner = _LoggedBackend(backends.reasoner, "reasoner", log)
        self.evaluator = _LoggedBackend(backends.evaluator, "evaluator", log)
        self.explorer = _LoggedBackend(backends.explorer, "explorer", log)
        self.retriever = _LoggedBackend(backends.retriever, "retriever", log)
        self.text_embedder = (
            _LoggedEmbedder(backends.text_embedder, "text_embedder", log)
            if backends.text_embedder else None
        )
        self.image_embedder = (
            _LoggedEmbedder(backends.image_embedder, "image_embedder", log)
            if backends.image_embedder else None
        )
        self.history = ReasoningHistory()
        self.caption = ""
        self.initial_answer = ""
        self.icl_block = ""
        self.reasoned: Optional[ReasonedAnswer] = None

    def note(self, agent: AgentRole, iteration: int, label: str, content: str) -> None:
        self.history = self.history.append(ReasoningEntry(agent, iteration, label, content))

    def check_history_cap(self) -> None:
        cap = self.config.max_history_chars
        if cap and len(self.history.render()) > cap:
            raise HistoryOverflowError(
                f"sample {self.sample.id}: rendered history exceeds {cap} chars; "
                "raise max_history_chars or lower max_iterations"
            )

    def perceive(self) -> None:
        caption, initial_answer = agents.perceive(
            self.perceiver, self.sample.image, self.sample.question,
            derive_seed(self.config.rng_seed, self.sample.id), self.prompts,
        )
        self.caption = caption
        self.initial_answer = initial_answer
        self.trace.caption = caption
        self.trace.initial_answer = initial_answer
        self.note(AgentRole.PERCEIVER, 0, "caption", caption)
        self.note(AgentRole.PERCEIVER, 0, "initial_answer", initial_answer)

    def select_examples(self) -> None:
        if self.config.k_shot == 0:
            return
        if self.pool is None:
            raise ConfigError("k_shot > 0 requires an in-context example pool")
        if self.text_embedder is None or self.image_embedder is None:
            raise ConfigError("k_shot > 0 requires text_embedder and image_embedder bindings")
        selection = select_icl(
            self.pool,
            self.text_embedder.embed_text(self.sample.question),
            self.image_embedder.embed_image(self.sample.image),
            self.config.k_shot,
        )
        block = render_icl_block(selection)
        if block:
            self.icl_block = f"{ICL_HEADER}\n{block}\n"

    def reason(self, iteration: int, rag_context: str) -> Optional[Confidence]:
        """Run the reasoner; returns a forced confidence when its response
        was malformed and the previous answer was retained."""
        self.check_history_cap()
        try:
            reasoned = agents.reason(
                self.reasoner, self.sample.kind, self.sample.question, self.caption,
                self.initial_answer, self.history, rag_context, self.icl_block,
                self.prompts, options=self.sample.options, lexicon=self.lexicon,
            )
        except agents.AnswerFormatError as exc:
            logger.warning("sample %s iter %d: %s; retaining previous answer",
                           self.sample.id, iteration, exc)
            self.note(AgentRole.REASONER, iteration, "answer", exc.raw)
            if self.reasoned is None:
                # Pre-loop pass: the only earlier answer is the perceiver's.
                self.reasoned = ReasonedAnswer(
                    analysis="",
                    answer=self.initial_answer,
                    normalized=agents.normalize_answer(
                        self.sample.kind, self.initial_answer,
                        options=self.sample.options, lexicon=self.lexicon,
                    ),
                    raw=exc.raw,
                )
            return Confidence(1, "reasoner format error; previous answer retained")
        self.note(AgentRole.REASONER, iteration, "answer", reasoned.raw)
        self.reasoned = reasoned
        return None

    def evaluate(self, iteration: int) -> Confidence:
        self.check_history_cap()
        assert self.reasoned is not None
        try:
            confidence = agents.evaluate(
                self.evaluator, self.sample.question, self.caption,
                self.reasoned.answer, self.history, self.icl_block, self.prompts,
            )
            entry_text = _confidence_entry(confidence)
        except agents.EvaluationFormatError as exc:
            logger.warning("sample %s iter %d: %s; treating as score 1",
                           self.sample.id, iteration, exc)
            confidence = Confidence(1, "unparseable evaluator response")
            entry_text = exc.raw
        self.note(AgentRole.EVALUATOR, iteration, "confidence", entry_text)
        return confidence

    def explore(self, iteration: int) -> list[SubQA]:
        try:
            sub_qas = agents.explore(
                self.explorer, self.perceiver, self.sample.image, self.sample.question,
                self.caption, self.history, self.config.max_sub_questions, self.prompts,
            )
        except agents.EmptyDecompositionError as exc:
            logger.warning("sample %s iter %d: %s; degraded iteration",
                           self.sample.id, iteration, exc)
            return []
        for sub_qa in sub_qas:
            self.note(AgentRole.EXPLORER, iteration, "sub_qa",
                      f"Q: {sub_qa.question}\nA: {sub_qa.answer}")
        return sub_qas

    def retrieve(self, iteration: int) -> str:
        if self.graph is None:
            return ""
        if self.text_embedder is None:
            raise ConfigError("retrieval requires a text_embedder binding when kg_path is set")
        rag_context = knowledge.retrieve(
            self.retriever, self.text_embedder, self.graph, self.history,
            self.caption, self.sample.question,
            self.config.retrieval_top_n, self.config.retrieval_min_similarity,
            self.prompts, self.relation_phrases,
        )
        if rag_context:
            self.note(AgentRole.RETRIEVER, iteration, "rag_context", rag_context)
        return rag_context

    def refinement_iteration(self, iteration: int) -> IterationRecord:
        sub_qas = self.explore(iteration)
        rag_context = self.retrieve(iteration)
        forced = self.reason(iteration, rag_context)
        confidence: Optional[Confidence] = None
        if self.adaptive:
            confidence = forced or self.evaluate(iteration)
        assert self.reasoned is not None
        return IterationRecord(
            iteration=iteration,
            sub_qas=tuple(sub_qas),
            rag_context=rag_context,
            reasoned=self.reasoned,
            confidence=confidence,
        )

    def execute(self) -> Trace:
        trace = self.trace
        try:
            self.perceive()
            self.select_examples()
            forced = self.reason(0, "")
            trace.initial_reasoned = self.reasoned
            if self.adaptive:
                confidence = forced or self.evaluate(0)
                trace.initial_confidence = confidence
                while (confidence.score < self.config.confidence_threshold
                       and len(trace.iterations) < self.config.max_iterations):
                    record = self.refinement_iteration(len(trace.iterations) + 1)
                    trace.iterations.append(record)
                    assert record.confidence is not None
                    confidence = record.confidence
                trace.stop_reason = (
                    StopReason.CONFIDENCE_MET
                    if confidence.score >= self.config.confidence_threshold
                    else StopReason.MAX_ITERATIONS
                )
            else:
                for iteration in range(1, self.config.fixed_iterations + 1):
                    trace.iterations.append(self.refinement_iteration(iteration))
                trace.stop_reason = StopReason.MAX_ITERATIONS
            assert self.reasoned is not None
            trace.final_answer = self.reasoned.answer
        except OfflineViolationError:
            # An offline violation is a run-level failure, never a per-sample one:
            # the whole point of --offline is to abort loudly on any miss.
            raise
        except (BackendError, HistoryOverflowError) as exc:
            logger.error("sample %s failed: %s", self.sample.id, exc)
            trace.failed = True
            trace.error = str(exc)
            last = trace.iterations[-1].reasoned if trace.iterations else trace.initial_reasoned
            trace.final_answer = last.answer if last else ""
            trace.stop_reason = None
        return trace


def run_sample(
    sample: Sample,
    config: RunConfig,
    backends: BackendSet,
    graph: Optional[KnowledgeGraph] = None,
    pool: Optional[list[CandidateExample]] = None,
    prompts: Optional[PromptLibrary] = None,
) -> Trace:
    """Execute the full loop for one sample and return its trace.

    Degraded iterations never abort a run: an empty decomposition skips the
    sub-QAs but still retrieves and re-reasons; a malformed reasoner response
    retains the previous answer at forced score 1; a malformed evaluator
    response counts as score 1. Unrecoverable backend failures mark the trace
    failed with whatever was produced so far.
    """
    prompts = prompts or PromptLibrary.load(config.prompts_dir or None)
    return _SampleRun(sample, config, backends, graph, pool, prompts).execute()


def serialize_trace(trace: Trace) -> dict:
    """Lossless structured document for a trace; stable schema, version 1."""

    def reasoned_doc(r: Optional[ReasonedAnswer]) -> Optional[dict]:
        if r is None:
            return None
        return {"analysis": r.analysis, "answer": r.answer,
                "normalized": r.normalized, "raw": r.raw}

    def confidence_doc(c: Optional[Confidence]) -> Optional[dict]:
        if c is None:
            return None
        return {"score": c.score, "explanation": c.explanation}

    return {
        "format": "medvqa-trace",
        "version": 1,
        "sample_id": trace.sample_id,
        "caption": trace.caption,
        "initial_answer": trace.initial_answer,
        "initial_reasoned": reasoned_doc(trace.initial_reasoned),
        "initial_confidence": confidence_doc(trace.initial_confidence),
        "iterations": [
            {
                "iteration": rec.iteration,
                "sub_qas": [
                    {"level": qa.level.name.lower(), "question": qa.question, "answer": qa.answer}
                    for qa in rec.sub_qas
                ],
                "rag_context": rec.rag_context,
                "reasoned": reasoned_doc(rec.reasoned),
                "confidence": confidence_doc(rec.confidence),
            }
            for rec in trace.iterations
        ],
        "final_answer": trace.final_answer,
        "stop_reason": trace.stop_reason.value if trace.stop_reason else None,
        "backend_call_log": [[role, hit] for role, hit in trace.backend_call_log],
        "failed": trace.failed,
        "error": trace.error,
    }


def trace_to_json(trace: Trace) -> str:
    return json.dumps(serialize_trace(trace), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def parse_trace(doc: dict) -> Trace:
    if doc.get("format") != "medvqa-trace" or doc.get("version") != 1:
        raise ValueError("not a medvqa-trace v1 document")

    def reasoned_from(raw: Optional[dict]) -> Optional[ReasonedAnswer]:
        if raw is None:
            return None
        return ReasonedAnswer(analysis=raw["analysis"], answer=raw["answer"],
                              normalized=raw["normalized"], raw=raw["raw"])

    def confidence_from(raw: Optional[dict]) -> Optional[Confidence]:
        if raw is None:
            return None
        return Confidence(score=raw["score"], explanation=raw["explanation"])

    iterations = [
        IterationRecord(
            iteration=rec["iteration"],
            sub_qas=tuple(
                SubQA(level=SubQuestionLevel[qa["level"].upper()],
                      question=qa["question"], answer=qa["answer"])
                for qa in rec["sub_qas"]
            ),
            rag_context=rec["rag_context"],
            reasoned=reasoned_from(rec["reasoned"]),
            confidence=confidence_from(rec["confidence"]),
        )
        for rec in doc["iterations"]
    ]
    return Trace(
        sample_id=doc["sample_id"],
        caption=doc["caption"],
        initial_answer=doc["initial_answer"],
        initial_reasoned=reasoned_from(doc["initial_reasoned"]),
        initial_confidence=confidence_from(doc["initial_confidence"]),
        iterations=iterations,
        final_answer=doc["final_answer"],
        stop_reason=StopReason(doc["stop_reason"]) if doc["stop_reason"] else None,
        backend_call_log=[(role, hit) for role, hit in doc["backend_call_log"]],
        failed=doc["failed"],
        error=doc["error"],
    )


def write_trace(trace: Trace, out_dir: str | Path) -> Path:
    traces_dir = Path(out_dir) / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    path = traces_dir / f"{trace.sample_id}.json"
    path.write_text(trace_to_json(trace), encoding="utf-8")
    return path
