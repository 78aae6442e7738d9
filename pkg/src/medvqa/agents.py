"""The Perceiver, Explorer, Reasoner, and Evaluator agents.

Each agent is a stateless function over (backend, inputs): it renders its
prompt template, sends one or more chat requests, and parses the response
format strictly. Templates live in ``prompts/`` as UTF-8 files with
``{name}`` placeholders; the shipped defaults are the canonical agent
instructions and are pinned by golden-file tests.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .core import QuestionKind, ReasoningHistory
from .gateway import Backend, ChatMessage, ChatRequest
from .textnorm import first_option_label, first_yes_no, option_labels

PROMPTS_DIR = Path(__file__).parent / "prompts"

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class PromptError(Exception):
    """Template could not be rendered (missing file or unbound placeholder)."""


class AnswerFormatError(Exception):
    """Reasoner response lacked an ``Answer:`` line; carries the raw text."""

    def __init__(self, raw: str) -> None:
        super().__init__(f"no 'Answer:' line in response: {raw[:120]!r}")
        self.raw = raw


class EmptyDecompositionError(Exception):
    """Explorer response contained zero parseable sub-questions."""


class EvaluationFormatError(Exception):
    """Evaluator response had no parseable in-range score; carries the raw text."""

    def __init__(self, raw: str, reason: str) -> None:
        super().__init__(f"{reason}: {raw[:120]!r}")
        self.raw = raw


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def required_placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.body))

    def render(self, **bindings: str) -> str:
        """Substitute every placeholder in one pass. Placeholders without a
        binding are errors; brace sequences inside substituted values are
        content, not placeholders."""
        missing = self.required_placeholders - bindings.keys()
        if missing:
            raise PromptError(f"template {self.name}: unbound placeholders {sorted(missing)}")
        return _PLACEHOLDER.sub(lambda m: bindings[m.group(1)], self.body)


def _load_template(directory: Path, name: str) -> PromptTemplate:
    path = directory / f"{name}.txt"
    if not path.exists():
        raise PromptError(f"missing prompt template: {path}")
    body = path.read_text(encoding="utf-8")
    if body.endswith("\n"):  # the trailing newline is a file artifact, not template text
        body = body[:-1]
    return PromptTemplate(name=name, body=body)


@dataclass(frozen=True)
class PromptLibrary:
    caption_prompts: tuple[str, ...]
    explorer_system: PromptTemplate
    explorer_user: PromptTemplate
    evaluator_system: PromptTemplate
    evaluator_user: PromptTemplate
    reasoner_open_system: PromptTemplate
    reasoner_open_user: PromptTemplate
    reasoner_closed_system: PromptTemplate
    reasoner_closed_user: PromptTemplate
    retriever_extract: PromptTemplate

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptLibrary":
        directory = Path(directory) if directory else PROMPTS_DIR
        captions_path = directory / "perceiver_captions.txt"
        if not captions_path.exists():
            raise PromptError(f"missing prompt template: {captions_path}")
        captions = tuple(
            line for line in captions_path.read_text(encoding="utf-8").splitlines() if line.strip()
        )
        if not captions:
            raise PromptError(f"{captions_path}: no caption prompts")
        return cls(
            caption_prompts=captions,
            explorer_system=_load_template(directory, "explorer_system"),
            explorer_user=_load_template(directory, "explorer_user"),
            evaluator_system=_load_template(directory, "evaluator_system"),
            evaluator_user=_load_template(directory, "evaluator_user"),
            reasoner_open_system=_load_template(directory, "reasoner_open_system"),
            reasoner_open_user=_load_template(directory, "reasoner_open_user"),
            reasoner_closed_system=_load_template(directory, "reasoner_closed_system"),
            reasoner_closed_user=_load_template(directory, "reasoner_closed_user"),
            retriever_extract=_load_template(directory, "retriever_extract"),
        )


class SubQuestionLevel(Enum):
    GENERAL_OBSERVATION = 1
    ANATOMICAL_ANALYSIS = 2
    DETAILED_FINDING = 3


@dataclass(frozen=True)
class SubQA:
    level: SubQuestionLevel
    question: str
    answer: str


@dataclass(frozen=True)
class ReasonedAnswer:
    analysis: str
    answer: str
    normalized: Optional[str]  # "Yes"/"No" or an option label, closed kinds only
    raw: str  # full model response, kept verbatim for the history

    def __post_init__(self) -> None:
        if not self.answer:
            raise ValueError("answer must be nonempty")


@dataclass(frozen=True)
class Confidence:
    score: int
    explanation: str

    def __post_init__(self) -> None:
        if self.score not in (1, 2, 3, 4, 5):
            raise ValueError(f"confidence score must be in 1..5, got {self.score}")


def _user_request(text: str, image: Optional[str] = None, **kw) -> ChatRequest:
    return ChatRequest(messages=(ChatMessage("user", text, image=image),), **kw)


def _system_user_request(system: str, user: str, image: Optional[str] = None) -> ChatRequest:
    return ChatRequest(messages=(ChatMessage("system", system), ChatMessage("user", user, image=image)))


def perceive(
    mllm: Backend, image: str, question: str, rng_seed: int, prompts: PromptLibrary
) -> tuple[str, str]:
    """Visual grounding pass: a detailed caption plus an initial answer.

    The caption instruction is drawn uniformly from the caption prompt list
    by a seeded RNG; the initial answer comes from sending the raw question.
    Both calls hit the same multimodal backend.
    """
    rng = random.Random(rng_seed)
    caption_prompt = prompts.caption_prompts[rng.randrange(len(prompts.caption_prompts))]
    caption = mllm.complete(_user_request(caption_prompt, image=image))
    initial_answer = mllm.complete(_user_request(question, image=image))
    return caption, initial_answer


_SUB_QUESTION = re.compile(r"^\s*Sub-question\s+\d+\s*:\s*(\S.*?)\s*$")

_LEVEL_BY_POSITION = {
    1: SubQuestionLevel.GENERAL_OBSERVATION,
    2: SubQuestionLevel.ANATOMICAL_ANALYSIS,
}


def parse_sub_questions(text: str, max_sub_questions: int) -> list[str]:
    """Extract ``Sub-question N:`` lines in order of appearance, keeping at
    most ``max_sub_questions``."""
    found = []
    # Split on "\n" only: splitlines() would also break on control characters
    # that are legitimate response content.
    for line in text.split("\n"):
        match = _SUB_QUESTION.match(line)
        if match:
            found.append(match.group(1))
    return found[:max_sub_questions]


def explore(
    llm: Backend,
    mllm: Backend,
    image: str,
    question: str,
    caption: str,
    history: ReasoningHistory,
    max_sub_questions: int,
    prompts: PromptLibrary,
) -> list[SubQA]:
    """Coarse-to-fine decomposition: generate follow-up questions with the
    text LLM, answer each against the image with the multimodal backend.

    Levels are positional (1 = general observation, 2 = anatomical analysis,
    3 and beyond = detailed finding), matching the prescribed question order.
    """
    if max_sub_questions < 1:
        raise ValueError("max_sub_questions must be >= 1")
    system = prompts.explorer_system.render(max_sub_questions=str(max_sub_questions))
    user = prompts.explorer_user.render(
        caption=caption, question=question, history=history.render()
    )
    response = llm.complete(_system_user_request(system, user))
    questions = parse_sub_questions(response, max_sub_questions)
    if not questions:
        raise EmptyDecompositionError(f"no 'Sub-question N:' lines in: {response[:120]!r}")
    sub_qas = []
    for position, sub_question in enumerate(questions, 1):
        level = _LEVEL_BY_POSITION.get(position, SubQuestionLevel.DETAILED_FINDING)
        answer = mllm.complete(_user_request(sub_question, image=image))
        sub_qas.append(SubQA(level=level, question=sub_question, answer=answer))
    return sub_qas


def format_question_with_options(question: str, options: Sequence[str]) -> str:
    """Append a multi-choice option list to the question text."""
    labels = option_labels(options)
    rendered = " ".join(f"({label}) {opt}" for label, opt in zip(labels, options))
    return f"{question}\nOptions: {rendered}"


def parse_reasoned(text: str) -> tuple[str, str]:
    """Split a reasoner response into (analysis, answer).

    The verdict is everything after the last line that starts with
    ``Answer:`` (models sometimes restate the marker mid-analysis); the
    analysis is whatever follows the first ``Analysis:`` marker before that
    line, or "" when the model skipped it.
    """
    lines = text.split("\n")
    answer_idx = None
    for i, line in enumerate(lines):
        if line.lstrip().startswith("Answer:"):
            answer_idx = i
    if answer_idx is None:
        raise AnswerFormatError(text)
    answer_line = lines[answer_idx].lstrip()
    tail_lines = [answer_line[len("Answer:"):]] + lines[answer_idx + 1:]
    answer = "\n".join(tail_lines).strip()
    head = "\n".join(lines[:answer_idx])
    marker = head.find("Analysis:")
    analysis = head[marker + len("Analysis:"):].strip() if marker != -1 else ""
    return analysis, answer


def normalize_answer(
    kind: QuestionKind,
    answer: str,
    options: Sequence[str] = (),
    lexicon: Optional[dict[str, str]] = None,
) -> Optional[str]:
    """Closed-kind normalization, a pure function of the answer text."""
    if kind is QuestionKind.CLOSED:
        return first_yes_no(answer, lexicon)
    if kind is QuestionKind.MULTICHOICE:
        return first_option_label(answer, options)
    return None


def reason(
    llm: Backend,
    kind: QuestionKind,
    question: str,
    caption: str,
    initial_answer: str,
    history: ReasoningHistory,
    rag_context: str,
    icl_block: str,
    prompts: PromptLibrary,
    options: Sequence[str] = (),
    lexicon: Optional[dict[str, str]] = None,
) -> ReasonedAnswer:
    """Synthesize all available context into an answer.

    Closed and multi-choice questions use the closed-ended template (with
    options appended to the question text); open questions use the open-ended
    one. ``rag_context`` and ``icl_block`` may be empty strings.
    """
    if kind is QuestionKind.OPEN:
        system_t, user_t = prompts.reasoner_open_system, prompts.reasoner_open_user
        question_text = question
    else:
        system_t, user_t = prompts.reasoner_closed_system, prompts.reasoner_closed_user
        question_text = (
            format_question_with_options(question, options)
            if kind is QuestionKind.MULTICHOICE
            else question
        )
    user = user_t.render(
        caption=caption,
        question=question_text,
        initial_answer=initial_answer,
        history=history.render(),
        rag_context=rag_context,
        icl_block=icl_block,
    )
    raw = llm.complete(_system_user_request(system_t.body, user))
    analysis, answer = parse_reasoned(raw)
    normalized = normalize_answer(kind, answer, options=options, lexicon=lexicon)
    return ReasonedAnswer(analysis=analysis, answer=answer, normalized=normalized, raw=raw)


_SCORE_LINE = re.compile(r"^\s*Score:\s*(-?\d+)\s*$")


def parse_confidence(text: str) -> Confidence:
    """Parse the first ``Score: <int>`` line; out-of-range scores are errors,
    never clamped. Explanation is the text after ``Explanation:`` when
    present, else whatever follows the score line."""
    lines = text.split("\n")
    score = None
    score_idx = None
    for i, line in enumerate(lines):
        match = _SCORE_LINE.match(line)
        if match:
            score = int(match.group(1))
            score_idx = i
            break
    if score is None:
        raise EvaluationFormatError(text, "no 'Score: <int>' line")
    if score not in (1, 2, 3, 4, 5):
        raise EvaluationFormatError(text, f"score {score} out of range 1..5")
    marker = text.find("Explanation:")
    if marker != -1:
        explanation = text[marker + len("Explanation:"):].strip()
    else:
        explanation = "\n".join(lines[score_idx + 1:]).strip()
    return Confidence(score=score, explanation=explanation)


def evaluate(
    llm: Backend,
    question: str,
    caption: str,
    answer: str,
    history: ReasoningHistory,
    icl_block: str,
    prompts: PromptLibrary,
) -> Confidence:
    """Confidence assessment of the current answer against the history."""
    user = prompts.evaluator_user.render(
        caption=caption,
        question=question,
        answer=answer,
        history=history.render(),
        icl_block=icl_block,
    )
    raw = llm.complete(_system_user_request(prompts.evaluator_system.body, user))
    return parse_confidence(raw)
