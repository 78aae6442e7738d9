"""Knowledge-graph grounding: local triple store, concept extraction,
subgraph retrieval, similarity filtering, and verbalization.

The graph is a flat TSV triple file loaded into memory; concept matching is
deliberately recall-oriented (bidirectional case-folded substring on subject
or object) because the downstream embedding filter handles precision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .agents import PromptLibrary
from .core import ReasoningHistory
from .gateway import Backend, ChatMessage, ChatRequest, Embedder, cosine

DEFAULT_RELATION_PHRASES = Path(__file__).parent / "data" / "relation_phrases.tsv"


class KgParseError(Exception):
    """Graph or phrase-table file failed to parse; names the line."""


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    relation: str
    object: str

    def __post_init__(self) -> None:
        for name in ("subject", "relation", "object"):
            if not getattr(self, name):
                raise ValueError(f"triple {name} must be nonempty")


@dataclass(frozen=True)
class VerbalizedFact:
    text: str
    source_triples: tuple[Triple, ...]
    similarity: float = 0.0


class KnowledgeGraph:
    """Immutable after load; safe for concurrent readers."""

    def __init__(self, triples: set[Triple]) -> None:
        self.triples = frozenset(triples)
        self._subject_index: dict[str, list[Triple]] = {}
        for triple in self.triples:
            self._subject_index.setdefault(triple.subject.casefold(), []).append(triple)
        for bucket in self._subject_index.values():
            bucket.sort()

    def __len__(self) -> int:
        return len(self.triples)

    def by_subject(self, subject: str) -> list[Triple]:
        return list(self._subject_index.get(subject.casefold(), []))


def _normalize_field(value: str) -> str:
    return re.sub(r"\s+", " ", value).strip()


def load_kg(path: str | Path) -> KnowledgeGraph:
    """Load a TSV triple file (`subject \\t relation \\t object`, # comments).

    Duplicate lines collapse to one triple; an empty file is a valid empty
    graph.
    """
    triples: set[Triple] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [_normalize_field(p) for p in line.split("\t")]
        if len(parts) != 3 or not all(parts):
            raise KgParseError(f"{path}:{lineno}: expected 'subject<TAB>relation<TAB>object'")
        triples.add(Triple(*parts))
    return KnowledgeGraph(triples)


def load_relation_phrases(path: str | Path | None = None) -> dict[str, str]:
    """Relation -> phrase table (TSV). Relations are matched case-sensitively."""
    path = Path(path) if path else DEFAULT_RELATION_PHRASES
    phrases = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise KgParseError(f"{path}:{lineno}: expected 'RELATION<TAB>phrase'")
        phrases[parts[0].strip()] = parts[1].strip()
    return phrases


_LIST_MARKER = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")

MAX_CONCEPTS = 10


def parse_concepts(text: str) -> list[str]:
    """Turn a concept-list response into clean concept strings: strip list
    markers, drop empties, dedupe case-insensitively keeping first occurrence,
    cap at MAX_CONCEPTS."""
    concepts: list[str] = []
    seen: set[str] = set()
    for line in text.splitlines():
        concept = _LIST_MARKER.sub("", line).strip()
        if not concept:
            continue
        folded = concept.casefold()
        if folded in seen:
            continue
        seen.add(folded)
        concepts.append(concept)
        if len(concepts) == MAX_CONCEPTS:
            break
    return concepts


def extract_concepts(llm: Backend, context: str, prompts: PromptLibrary) -> list[str]:
    """Ask the LLM for the key medical concepts in ``context``.

    Zero parsed concepts is not an error; retrieval just yields nothing.
    """
    if not context:
        raise ValueError("context must be nonempty")
    user = prompts.retriever_extract.render(context=context)
    response = llm.complete(ChatRequest(messages=(ChatMessage("user", user),)))
    return parse_concepts(response)


def _bidirectional_substring(a: str, b: str) -> bool:
    return a in b or b in a


def query_subgraph(graph: KnowledgeGraph, concept: str) -> list[Triple]:
    """All triples whose subject or object matches the concept by
    case-folded substring in either direction, in lexicographic order."""
    folded = concept.casefold()
    if not folded:
        return []
    hits = [
        t for t in graph.triples
        if _bidirectional_substring(folded, t.subject.casefold())
        or _bidirectional_substring(folded, t.object.casefold())
    ]
    return sorted(hits)


def verbalize(triples: list[Triple], relation_phrases: Optional[dict[str, str]] = None) -> list[VerbalizedFact]:
    """One natural-language fact per (subject, relation) group:
    ``"{subject} {phrase}: {objects, sorted, comma-joined}"``. Unknown
    relations fall back to the lowercased relation token."""
    if relation_phrases is None:
        relation_phrases = load_relation_phrases()
    groups: dict[tuple[str, str], list[Triple]] = {}
    for triple in triples:
        groups.setdefault((triple.subject, triple.relation), []).append(triple)
    facts = []
    for (subject, relation), members in sorted(groups.items()):
        phrase = relation_phrases.get(relation, relation.lower())
        objects = sorted({t.object for t in members})
        text = f"{subject} {phrase}: {', '.join(objects)}"
        facts.append(VerbalizedFact(text=text, source_triples=tuple(sorted(members))))
    return facts


def filter_facts(
    facts: list[VerbalizedFact],
    query_context: str,
    embedder: Embedder,
    top_n: int,
    min_similarity: float,
) -> list[VerbalizedFact]:
    """Keep the ``top_n`` facts most cosine-similar to the query context,
    dropping anything under ``min_similarity``. Ties break on fact text."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if not facts:
        return []
    query_vec = embedder.embed_text(query_context)
    scored = []
    for fact in facts:
        sim = cosine(embedder.embed_text(fact.text), query_vec)
        if sim >= min_similarity:
            scored.append(replace(fact, similarity=sim))
    scored.sort(key=lambda f: (-f.similarity, f.text))
    return scored[:top_n]


def build_query_context(history: ReasoningHistory, caption: str, question: str) -> str:
    """The accumulated context concept extraction and fact filtering run
    against: rendered history plus caption plus question."""
    parts = [p for p in (history.render(), caption, question) if p]
    return "\n".join(parts)


def retrieve(
    llm: Backend,
    embedder: Embedder,
    graph: KnowledgeGraph,
    history: ReasoningHistory,
    caption: str,
    question: str,
    top_n: int,
    min_similarity: float,
    prompts: PromptLibrary,
    relation_phrases: Optional[dict[str, str]] = None,
) -> str:
    """Full grounding pipeline: extract concepts, pull each concept's
    subgraph, verbalize the union, filter by embedding similarity, join the
    surviving fact texts with newlines. Empty at any stage yields ""."""
    context = build_query_context(history, caption, question)
    concepts = extract_concepts(llm, context, prompts)
    if not concepts:
        return ""
    matched: set[Triple] = set()
    for concept in concepts:
        matched.update(query_subgraph(graph, concept))
    if not matched:
        return ""
    facts = verbalize(sorted(matched), relation_phrases)
    kept = filter_facts(facts, context, embedder, top_n, min_similarity)
    return "\n".join(fact.text for fact in kept)
