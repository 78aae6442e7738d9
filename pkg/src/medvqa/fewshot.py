"""In-context example pool and dual-similarity top-K selection.

Each candidate carries a generated caption, its question/answer pair, and
two embeddings. Selection scores a candidate as the mean of its text and
image cosine similarities to the test sample and keeps the K best, ties
broken by pool index so the result is a pure function of the inputs.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .agents import PromptLibrary
from .core import Sample, derive_seed
from .gateway import Backend, ChatMessage, ChatRequest, Embedder, cosine

logger = logging.getLogger(__name__)

POOL_FORMAT = "medvqa-pool"
POOL_VERSION = 1


class PoolFormatError(Exception):
    """Pool file is missing its header or has malformed records."""


@dataclass(frozen=True)
class CandidateExample:
    id: str
    caption: str
    question: str
    answer: str
    text_embedding: tuple[float, ...]
    image_embedding: tuple[float, ...]


@dataclass(frozen=True)
class IclSelection:
    examples: tuple[CandidateExample, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class PoolBuildReport:
    built: int
    skipped: tuple[tuple[str, str], ...]  # (sample id, reason)


def build_pool(
    samples: Sequence[Sample],
    perceiver: Backend,
    text_embedder: Embedder,
    image_embedder: Embedder,
    rng_seed: int,
    prompts: PromptLibrary,
) -> tuple[list[CandidateExample], PoolBuildReport]:
    """Caption every sample with the perceiver's caption pass and embed its
    question and image. Samples whose backend calls fail are skipped with a
    warning and recorded in the build report; samples need a ground truth."""
    examples = []
    skipped = []
    for sample in samples:
        if sample.ground_truth is None:
            raise ValueError(f"sample {sample.id!r}: pool samples need a ground-truth answer")
        try:
            rng = random.Random(derive_seed(rng_seed, sample.id))
            caption_prompt = prompts.caption_prompts[rng.randrange(len(prompts.caption_prompts))]
            caption = perceiver.complete(
                ChatRequest(messages=(ChatMessage("user", caption_prompt, image=sample.image),))
            )
            text_emb = tuple(text_embedder.embed_text(sample.question))
            image_emb = tuple(image_embedder.embed_image(sample.image))
        except Exception as exc:
            logger.warning("pool build: skipping sample %s: %s", sample.id, exc)
            skipped.append((sample.id, str(exc)))
            continue
        examples.append(
            CandidateExample(
                id=sample.id,
                caption=caption,
                question=sample.question,
                answer=sample.ground_truth,
                text_embedding=text_emb,
                image_embedding=image_emb,
            )
        )
    return examples, PoolBuildReport(built=len(examples), skipped=tuple(skipped))


def save_pool(examples: Sequence[CandidateExample], path: str | Path) -> None:
    """Line-delimited records under a versioned header; rebuilds from
    identical inputs are byte-identical."""
    lines = [json.dumps({"format": POOL_FORMAT, "version": POOL_VERSION},
                        sort_keys=True, separators=(",", ":"))]
    for ex in examples:
        lines.append(json.dumps({
            "answer": ex.answer,
            "caption": ex.caption,
            "id": ex.id,
            "image_embedding": list(ex.image_embedding),
            "question": ex.question,
            "text_embedding": list(ex.text_embedding),
        }, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pool(path: str | Path) -> list[CandidateExample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PoolFormatError(f"{path}: empty pool file")
    header = json.loads(lines[0])
    if header.get("format") != POOL_FORMAT or header.get("version") != POOL_VERSION:
        raise PoolFormatError(f"{path}: not a {POOL_FORMAT} v{POOL_VERSION} file")
    examples = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            examples.append(CandidateExample(
                id=doc["id"],
                caption=doc["caption"],
                question=doc["question"],
                answer=doc["answer"],
                text_embedding=tuple(float(x) for x in doc["text_embedding"]),
                image_embedding=tuple(float(x) for x in doc["image_embedding"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PoolFormatError(f"{path}:{lineno}: {exc}") from exc
    return examples


def select_icl(
    pool: Sequence[CandidateExample],
    test_text_emb: Sequence[float],
    test_image_emb: Sequence[float],
    k: int,
) -> IclSelection:
    """Top-K by the dual-similarity score
    ``0.5 * (cos(text, text_i) + cos(image, image_i))``.

    K = 0 selects nothing; K beyond the pool size returns the whole pool
    sorted. Exact score ties keep the lower pool index first.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return IclSelection(examples=(), scores=())
    if not pool:
        raise ValueError("pool must be nonempty when k > 0")
    scored = []
    for index, example in enumerate(pool):
        try:
            text_sim = cosine(list(test_text_emb), list(example.text_embedding))
            image_sim = cosine(list(test_image_emb), list(example.image_embedding))
        except ValueError as exc:
            raise ValueError(f"pool entry {example.id!r}: {exc}") from exc
        scored.append((0.5 * (text_sim + image_sim), index, example))
    scored.sort(key=lambda item: (-item[0], item[1]))
    top = scored[:k]
    return IclSelection(
        examples=tuple(example for _, _, example in top),
        scores=tuple(score for score, _, _ in top),
    )


def render_icl_block(selection: IclSelection) -> str:
    """Deterministic text block, one section per selected example in score
    order; empty selection renders as ""."""
    sections = []
    for n, ex in enumerate(selection.examples, 1):
        sections.append(
            f"Example {n}:\n"
            f"Image description: {ex.caption}\n"
            f"Question: {ex.question}\n"
            f"Answer: {ex.answer}"
        )
    return "\n\n".join(sections)
