"""Shared domain types: VQA samples, the reasoning history, and run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending key."""


class QuestionKind(str, Enum):
    CLOSED = "closed"
    OPEN = "open"
    MULTICHOICE = "multichoice"


class AgentRole(str, Enum):
    PERCEIVER = "Perceiver"
    REASONER = "Reasoner"
    EVALUATOR = "Evaluator"
    EXPLORER = "Explorer"
    RETRIEVER = "Retriever"


@dataclass(frozen=True)
class Sample:
    """One VQA item. ``image`` is an opaque reference (path or URL) that only
    the gateway ever resolves; ``ground_truth`` is optional so the same type
    serves inference-only and evaluation runs."""

    id: str
    image: str
    question: str
    kind: QuestionKind
    ground_truth: Optional[str] = None
    options: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("sample id must be nonempty")
        if self.kind is QuestionKind.MULTICHOICE and len(self.options) < 2:
            raise ValueError(f"sample {self.id!r}: multichoice requires at least 2 options")


@dataclass(frozen=True)
class ReasoningEntry:
    """One agent output. Iteration 0 is the perception phase; refinement
    iterations number from 1."""

    agent: AgentRole
    iteration: int
    label: str
    content: str

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")


@dataclass(frozen=True)
class ReasoningHistory:
    """Append-only, ordered record of all intermediate agent outputs.

    Immutable: ``append`` returns a new history, so per-sample histories can
    move freely between execution contexts.
    """

    entries: tuple[ReasoningEntry, ...] = ()

    def append(self, entry: ReasoningEntry) -> "ReasoningHistory":
        return ReasoningHistory(self.entries + (entry,))

    def render(self) -> str:
        return render_history(self)

    def __len__(self) -> int:
        return len(self.entries)


def append(history: ReasoningHistory, entry: ReasoningEntry) -> ReasoningHistory:
    """Return a new history with ``entry`` as its last element."""
    return history.append(entry)


def derive_seed(base_seed: int, sample_id: str) -> int:
    """Stable per-sample RNG seed.

    Depends only on (base seed, sample id), never on execution order, so
    parallel runs and reruns draw identical randomness per sample.
    """
    import hashlib

    digest = hashlib.sha256(f"{base_seed}:{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def render_history(history: ReasoningHistory) -> str:
    """Render a history as a deterministic text block, one section per entry.

    Format is fixed so prompt bytes are reproducible across runs: a header
    line ``[{agent} | iter {n} | {label}]`` followed by the entry content,
    sections separated by blank lines. Empty history renders as "".
    """
    return "\n\n".join(
        f"[{e.agent.value} | iter {e.iteration} | {e.label}]\n{e.content}"
        for e in history.entries
    )


# Chat-capable roles each need a backend binding; the two embedder slots feed
# few-shot selection and retrieval filtering.
CHAT_ROLES = ("perceiver", "reasoner", "evaluator", "explorer", "retriever")
EMBEDDER_ROLES = ("text_embedder", "image_embedder")

_BACKEND_KINDS = ("http", "scripted", "fixture")


@dataclass
class BackendSpec:
    """Declarative binding of one role to a backend.

    kind "http": chat-completions endpoint (``endpoint_url``, ``model_id``,
    API key read from the env var named by ``auth_env``).
    kind "scripted": deterministic transcript replay (``script_path``).
    kind "fixture": embedding lookup table (``fixture_path``), embedders only.
    """

    kind: str
    endpoint_url: str = ""
    model_id: str = ""
    auth_env: str = ""
    script_path: str = ""
    fixture_path: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024

    def validate(self, role: str) -> None:
        if self.kind not in _BACKEND_KINDS:
            raise ConfigError(f"backends.{role}.kind: unknown kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint_url:
            raise ConfigError(f"backends.{role}.endpoint_url: required for http backends")
        if self.kind == "scripted" and not self.script_path:
            raise ConfigError(f"backends.{role}.script_path: required for scripted backends")
        if self.kind == "fixture" and not self.fixture_path:
            raise ConfigError(f"backends.{role}.fixture_path: required for fixture backends")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, role: str, raw: dict[str, Any]) -> "BackendSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"backends.{role}.{key}: unknown key")
        if "kind" not in raw:
            raise ConfigError(f"backends.{role}.kind: missing")
        spec = cls(**raw)
        spec.validate(role)
        return spec


@dataclass
class RunConfig:
    """Everything a run needs: loop bounds, selection size, backend bindings,
    retrieval knobs. Defaults: at most 3 refinement iterations, confidence
    threshold 3 of 5, 4 in-context examples."""

    max_iterations: int = 3
    confidence_threshold: int = 3
    max_sub_questions: int = 3
    k_shot: int = 4
    rng_seed: int = 0
    workers: int = 1
    offline: bool = False
    # -1 = adaptive (threshold-gated); >= 0 = run exactly N refinement
    # iterations with the evaluator disabled (ablation mode).
    fixed_iterations: int = -1
    kg_path: str = ""
    relation_phrases_path: str = ""
    retrieval_top_n: int = 5
    retrieval_min_similarity: float = 0.0
    cache_dir: str = ""
    lexicon_path: str = ""
    prompts_dir: str = ""
    icl_pool_path: str = ""
    # 0 = unlimited; > 0 = hard cap on rendered history length, exceeding it
    # is an explicit per-sample error (never silent truncation).
    max_history_chars: int = 0
    backends: dict[str, BackendSpec] = field(default_factory=dict)

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError("max_iterations: must be >= 1")
        if not 1 <= self.confidence_threshold <= 5:
            raise ConfigError("confidence_threshold: must be in 1..5")
        if self.max_sub_questions < 1:
            raise ConfigError("max_sub_questions: must be >= 1")
        if self.k_shot < 0:
            raise ConfigError("k_shot: must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.fixed_iterations < -1:
            raise ConfigError("fixed_iterations: must be -1 (adaptive) or >= 0")
        if self.retrieval_top_n < 1:
            raise ConfigError("retrieval_top_n: must be >= 1")
        if not -1.0 <= self.retrieval_min_similarity <= 1.0:
            raise ConfigError("retrieval_min_similarity: must be in [-1, 1]")
        if self.max_history_chars < 0:
            raise ConfigError("max_history_chars: must be >= 0")
        for role, spec in self.backends.items():
            if role not in CHAT_ROLES and role not in EMBEDDER_ROLES:
                raise ConfigError(f"backends.{role}: unknown role")
            spec.validate(role)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["backends"] = {role: spec.to_dict() for role, spec in self.backends.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        raw = dict(raw)
        backends_raw = raw.pop("backends", {})
        known = {f.name for f in dataclasses.fields(cls) if f.name != "backends"}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown config key")
        config = cls(**raw)
        config.backends = {
            role: BackendSpec.from_dict(role, dict(spec)) for role, spec in backends_raw.items()
        }
        config.validate()
        return config

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        config = cls.from_dict(raw)
        config._resolve_paths(Path(path).parent)
        return config

    def _resolve_paths(self, base: Path) -> None:
        """Make config-relative paths absolute against the config file's directory."""
        for attr in ("kg_path", "relation_phrases_path", "cache_dir", "lexicon_path",
                     "prompts_dir", "icl_pool_path"):
            value = getattr(self, attr)
            if value and not os.path.isabs(value):
                setattr(self, attr, str(base / value))
        for spec in self.backends.values():
            for attr in ("script_path", "fixture_path"):
                value = getattr(spec, attr)
                if value and not os.path.isabs(value):
                    setattr(spec, attr, str(base / value))

    def to_toml_str(self) -> str:
        """Serialize to the TOML config format. Lossless: ``from_dict`` of the
        parsed output equals this config."""
        lines = []
        for key, value in self.to_dict().items():
            if key == "backends":
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        for role in sorted(self.backends):
            lines.append("")
            lines.append(f"[backends.{role}]")
            for key, value in self.backends[role].to_dict().items():
                lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise ConfigError(f"cannot serialize config value {value!r}")
