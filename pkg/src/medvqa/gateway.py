"""Uniform access to chat models and embedding providers.

Three backend kinds share one interface: a wire client for
chat-completions-style HTTP endpoints, a deterministic scripted backend that
replays a transcript file, and a content-addressed on-disk cache that wraps
either. Embedding providers mirror the same split (HTTP endpoint, fixture
table, cached wrapper).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import mimetypes
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import requests


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Network failure that survived the retry budget."""


class MalformedResponseError(BackendError):
    """Endpoint returned something that is not a chat-completion response."""


class OfflineViolationError(BackendError):
    """A network call was attempted in offline mode; names the cache key."""


class TranscriptError(BackendError):
    """Transcript file failed to parse."""


class ScriptExhaustedError(BackendError):
    """Scripted backend has no next response: fixture/pipeline mismatch."""


class ScriptAssertionError(BackendError):
    """An outgoing prompt did not contain a transcript's expected substring."""


class EmbeddingLookupError(BackendError):
    """Fixture embedder was asked for a key it does not contain."""


# Process-wide count of attempted network sends; lets tests assert that fully
# scripted or cached runs perform zero network I/O.
_net_lock = threading.Lock()
_net_calls = 0


def network_call_count() -> int:
    return _net_calls


def reset_network_call_count() -> None:
    global _net_calls
    with _net_lock:
        _net_calls = 0


def _count_network_call() -> None:
    global _net_calls
    with _net_lock:
        _net_calls += 1


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user"
    text: str
    image: Optional[str] = None  # opaque ref: file path or URL


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if sum(1 for m in self.messages if m.image is not None) > 1:
            raise ValueError("at most one image per request")

    def prompt_text(self) -> str:
        """All message texts joined; the surface transcript assertions match on."""
        return "\n\n".join(m.text for m in self.messages)


def canonical_request(request: ChatRequest, model_id: str) -> str:
    """Canonical serialization of a request plus the serving model id.

    Key order is fixed by sort_keys, so the digest is independent of how the
    request was assembled. Auth is deliberately absent.
    """
    doc = {
        "max_tokens": request.max_tokens,
        "messages": [
            {"image": m.image, "role": m.role, "text": m.text} for m in request.messages
        ],
        "model_id": model_id,
        "temperature": request.temperature,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(request: ChatRequest, model_id: str) -> str:
    return hashlib.sha256(canonical_request(request, model_id).encode("utf-8")).hexdigest()


class ResponseCache:
    """On-disk key-value store, one JSON file per key under
    ``<root>/<first-2-hex>/<digest>.json``. Writes are write-temp-then-rename
    and at most once per key."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> Optional[str]:
        path = self._path(key)
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        return doc["response"]

    def store(self, key: str, response: str, model_id: str) -> None:
        path = self._path(key)
        if path.exists():  # at-most-once: retries never rewrite an entry
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"model_id": model_id, "response": response, "timestamp": time.time()}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def stats(self) -> dict[str, int]:
        n = sum(1 for _ in self.root.glob("*/*.json")) if self.root.exists() else 0
        return {"entries": n}

    def clear(self) -> int:
        removed = 0
        if self.root.exists():
            for path in self.root.glob("*/*.json"):
                path.unlink()
                removed += 1
        return removed


class Backend(Protocol):
    """Chat backend: send one request, get the model's text back."""

    model_id: str

    def complete(self, request: ChatRequest) -> str: ...

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        """Return (text, served_from_cache)."""
        ...


def resolve_image(ref: str) -> str:
    """Resolve an opaque image ref into wire content: URLs pass through,
    local files become data URIs."""
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    mime = mimetypes.guess_type(ref)[0] or "application/octet-stream"
    payload = base64.b64encode(Path(ref).read_bytes()).decode("ascii")
    return f"data:{mime};base64,{payload}"


class HttpChatBackend:
    """Wire client for chat-completions-compatible JSON endpoints.

    Retries transport errors and 5xx/429 up to 3 attempts with exponential
    backoff starting at 1s. Other HTTP errors are not retried.
    """

    ATTEMPTS = 3
    BACKOFF_S = 1.0

    def __init__(
        self,
        endpoint_url: str,
        model_id: str,
        auth_env: str = "",
        timeout_s: float = 60.0,
        sleeper: Callable[[float], None] = time.sleep,
        offline: bool = False,
    ) -> None:
        self.endpoint_url = endpoint_url
        self.model_id = model_id
        self.auth_env = auth_env
        self.timeout_s = timeout_s
        self._sleep = sleeper
        self.offline = offline

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            key = os.environ.get(self.auth_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.image is None:
                messages.append({"role": m.role, "content": m.text})
            else:
                messages.append({
                    "role": m.role,
                    "content": [
                        {"type": "text", "text": m.text},
                        {"type": "image_url", "image_url": {"url": resolve_image(m.image)}},
                    ],
                })
        return {
            "model": self.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": messages,
        }

    def complete(self, request: ChatRequest) -> str:
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        if self.offline:
            raise OfflineViolationError(
                f"offline mode: network call refused for key {cache_key(request, self.model_id)}"
            )
        payload = self._payload(request)
        last_error: Optional[Exception] = None
        for attempt in range(self.ATTEMPTS):
            if attempt:
                self._sleep(self.BACKOFF_S * 2 ** (attempt - 1))
            _count_network_call()
            try:
                resp = requests.post(
                    self.endpoint_url, json=payload, headers=self._headers(),
                    timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code} from {self.endpoint_url}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code} from {self.endpoint_url}: {resp.text[:200]}")
            return self._extract_text(resp), False
        raise TransportError(f"giving up after {self.ATTEMPTS} attempts: {last_error}")

    def _extract_text(self, resp: requests.Response) -> str:
        try:
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                f"malformed endpoint response from {self.endpoint_url}: {resp.text[:200]}"
            ) from exc
        if not isinstance(text, str):
            raise MalformedResponseError(f"non-string message content from {self.endpoint_url}")
        return text


@dataclass
class ScriptRecord:
    role: str
    response: str
    expect: tuple[str, ...] = ()


class ScriptedScript:
    """The shared, ordered stack of scripted responses for one run.

    Single-consumer: responses are served strictly in file order, each tagged
    with the agent role that must consume it. A role mismatch or an exhausted
    script is fatal; it means the fixture and the pipeline disagree.
    """

    def __init__(self, records: list[ScriptRecord], source: str = "<memory>") -> None:
        self.records = records
        self.source = source
        self._next = 0
        self._lock = threading.Lock()

    @classmethod
    def from_path(cls, path: str | Path) -> "ScriptedScript":
        records = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                doc = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise TranscriptError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(doc, dict) or "role" not in doc or "response" not in doc:
                raise TranscriptError(f"{path}:{lineno}: record needs 'role' and 'response'")
            role = str(doc["role"]).lower()
            if role not in ("perceiver", "reasoner", "evaluator", "explorer", "retriever"):
                raise TranscriptError(f"{path}:{lineno}: unknown role {doc['role']!r}")
            expect = doc.get("expect", [])
            if not isinstance(expect, list) or not all(isinstance(e, str) for e in expect):
                raise TranscriptError(f"{path}:{lineno}: 'expect' must be a list of strings")
            records.append(ScriptRecord(role=role, response=str(doc["response"]),
                                        expect=tuple(expect)))
        return cls(records, source=str(path))

    def next_response(self, role: str, prompt_text: str) -> str:
        with self._lock:
            if self._next >= len(self.records):
                raise ScriptExhaustedError(
                    f"{self.source}: script exhausted at call {self._next + 1} (role {role})"
                )
            record = self.records[self._next]
            if record.role != role:
                raise ScriptExhaustedError(
                    f"{self.source}: record {self._next + 1} is for role "
                    f"{record.role!r} but {role!r} called"
                )
            for needle in record.expect:
                if needle not in prompt_text:
                    raise ScriptAssertionError(
                        f"{self.source}: record {self._next + 1} expected prompt to contain "
                        f"{needle!r}; prompt starts {prompt_text[:120]!r}"
                    )
            self._next += 1
            return record.response

    def remaining(self) -> int:
        return len(self.records) - self._next


class ScriptedBackend:
    """Role-bound view over a shared script."""

    def __init__(self, script: ScriptedScript, role: str, model_id: str = "scripted") -> None:
        self.script = script
        self.role = role
        self.model_id = model_id

    def complete(self, request: ChatRequest) -> str:
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        return self.script.next_response(self.role, request.prompt_text()), False


class CachedBackend:
    """Content-addressed cache wrapper: hit serves stored bytes with no
    delegate call; miss delegates and stores exactly once."""

    def __init__(self, inner: Backend, cache: ResponseCache, offline: bool = False) -> None:
        self.inner = inner
        self.cache = cache
        self.offline = offline

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    def complete(self, request: ChatRequest) -> str:
        return self.complete_with_meta(request)[0]

    def complete_with_meta(self, request: ChatRequest) -> tuple[str, bool]:
        key = cache_key(request, self.inner.model_id)
        stored = self.cache.lookup(key)
        if stored is not None:
            return stored, True
        if self.offline:
            raise OfflineViolationError(f"offline mode: cache miss for key {key}")
        text = self.inner.complete(request)
        self.cache.store(key, text, self.inner.model_id)
        return text, False


def cosine(a: list[float], b: list[float]) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


class Embedder(Protocol):
    model_id: str
    dim: int

    def embed_text(self, text: str) -> list[float]: ...

    def embed_image(self, image: str) -> list[float]: ...

    def embed_text_with_meta(self, text: str) -> tuple[list[float], bool]:
        """Return (vector, served_from_cache)."""
        ...

    def embed_image_with_meta(self, image: str) -> tuple[list[float], bool]: ...


class FixtureEmbedder:
    """Deterministic embedding provider reading a key -> vector table.

    File format: ``key<TAB>v1,v2,...`` lines, # comments. A ``*`` key, when
    present, serves as the vector for any input not otherwise listed; without
    it, unknown inputs are errors.
    """

    model_id = "fixture"

    def __init__(self, table: dict[str, list[float]], source: str = "<memory>") -> None:
        if not table:
            raise EmbeddingLookupError(f"{source}: empty embedding fixture")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise EmbeddingLookupError(f"{source}: inconsistent vector dims {sorted(dims)}")
        self.table = table
        self.dim = dims.pop()
        self.source = source

    @classmethod
    def from_path(cls, path: str | Path) -> "FixtureEmbedder":
        table: dict[str, list[float]] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise EmbeddingLookupError(f"{path}:{lineno}: expected 'key<TAB>v1,v2,...'")
            try:
                vector = [float(x) for x in parts[1].split(",")]
            except ValueError as exc:
                raise EmbeddingLookupError(f"{path}:{lineno}: bad vector: {exc}") from exc
            table[parts[0]] = vector
        return cls(table, source=str(path))

    def _lookup(self, key: str) -> list[float]:
        if key in self.table:
            return list(self.table[key])
        if "*" in self.table:
            return list(self.table["*"])
        raise EmbeddingLookupError(f"{self.source}: no embedding fixture for key {key!r}")

    def embed_text(self, text: str) -> list[float]:
        if not text:
            raise EmbeddingLookupError("cannot embed empty text")
        return self._lookup(text)

    def embed_image(self, image: str) -> list[float]:
        return self._lookup(image)

    def embed_text_with_meta(self, text: str) -> tuple[list[float], bool]:
        return self.embed_text(text), False

    def embed_image_with_meta(self, image: str) -> tuple[list[float], bool]:
        return self.embed_image(image), False


class HttpEmbedder:
    """Minimal embeddings wire client: POST {"model", "input"} and read
    {"data": [{"embedding": [...]}]}. Images are sent as their resolved ref."""

    def __init__(self, endpoint_url: str, model_id: str, dim: int = 0,
                 auth_env: str = "", timeout_s: float = 60.0, offline: bool = False) -> None:
        self.endpoint_url = endpoint_url
        self.model_id = model_id
        self.dim = dim
        self.auth_env = auth_env
        self.timeout_s = timeout_s
        self.offline = offline

    def _post(self, payload: dict) -> list[float]:
        if self.offline:
            raise OfflineViolationError("offline mode: embedding network call refused")
        headers = {"Content-Type": "application/json"}
        if self.auth_env and os.environ.get(self.auth_env):
            headers["Authorization"] = f"Bearer {os.environ[self.auth_env]}"
        _count_network_call()
        try:
            resp = requests.post(self.endpoint_url, json=payload, headers=headers,
                                 timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"HTTP {resp.status_code} from {self.endpoint_url}")
        try:
            vector = resp.json()["data"][0]["embedding"]
            vector = [float(x) for x in vector]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"malformed embedding response: {resp.text[:200]}") from exc
        if self.dim and len(vector) != self.dim:
            raise MalformedResponseError(f"expected dim {self.dim}, got {len(vector)}")
        if not self.dim:
            self.dim = len(vector)
        return vector

    def embed_text(self, text: str) -> list[float]:
        if not text:
            raise BackendError("cannot embed empty text")
        return self._post({"model": self.model_id, "input": text})

    def embed_image(self, image: str) -> list[float]:
        return self._post({"model": self.model_id, "input": resolve_image(image)})

    def embed_text_with_meta(self, text: str) -> tuple[list[float], bool]:
        return self.embed_text(text), False

    def embed_image_with_meta(self, image: str) -> tuple[list[float], bool]:
        return self.embed_image(image), False


class CachedEmbedder:
    """Cache wrapper for embedding providers, sharing the response cache
    directory mechanics (vector stored as the JSON response payload)."""

    def __init__(self, inner: Embedder, cache: ResponseCache, offline: bool = False) -> None:
        self.inner = inner
        self.cache = cache
        self.offline = offline

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    @property
    def dim(self) -> int:
        return self.inner.dim

    def _key(self, kind: str, payload: str) -> str:
        doc = json.dumps({"input": payload, "kind": kind, "model_id": self.inner.model_id},
                         sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()

    def _through(self, kind: str, payload: str,
                 compute: Callable[[], list[float]]) -> tuple[list[float], bool]:
        key = self._key(kind, payload)
        stored = self.cache.lookup(key)
        if stored is not None:
            return json.loads(stored), True
        if self.offline:
            raise OfflineViolationError(f"offline mode: embedding cache miss for key {key}")
        vector = compute()
        self.cache.store(key, json.dumps(vector), self.inner.model_id)
        return vector, False

    def embed_text(self, text: str) -> list[float]:
        return self.embed_text_with_meta(text)[0]

    def embed_image(self, image: str) -> list[float]:
        return self.embed_image_with_meta(image)[0]

    def embed_text_with_meta(self, text: str) -> tuple[list[float], bool]:
        return self._through("embed_text", text, lambda: self.inner.embed_text(text))

    def embed_image_with_meta(self, image: str) -> tuple[list[float], bool]:
        return self._through("embed_image", image, lambda: self.inner.embed_image(image))


@dataclass
class BackendSet:
    """Resolved per-role bindings for one run."""

    perceiver: Backend
    reasoner: Backend
    evaluator: Backend
    explorer: Backend
    retriever: Backend
    text_embedder: Optional[Embedder] = None
    image_embedder: Optional[Embedder] = None
    scripts: dict[str, ScriptedScript] = field(default_factory=dict)

    def chat_backend(self, role: str) -> Backend:
        return getattr(self, role)

    @property
    def any_scripted(self) -> bool:
        return bool(self.scripts)


def build_backends(config) -> BackendSet:
    """Construct a BackendSet from RunConfig bindings.

    Scripted roles that name the same transcript file share one script
    instance, so a single transcript can drive the entire pipeline in order.
    """
    from . import core

    scripts: dict[str, ScriptedScript] = {}
    caches: dict[str, ResponseCache] = {}

    def get_cache() -> ResponseCache:
        if config.cache_dir not in caches:
            caches[config.cache_dir] = ResponseCache(config.cache_dir)
        return caches[config.cache_dir]

    def chat_for(role: str) -> Backend:
        spec = config.backends.get(role)
        if spec is None:
            raise core.ConfigError(f"backends.{role}: missing binding")
        if spec.kind == "scripted":
            path = str(Path(spec.script_path).resolve())
            if path not in scripts:
                scripts[path] = ScriptedScript.from_path(path)
            return ScriptedBackend(scripts[path], role)
        if spec.kind == "http":
            backend: Backend = HttpChatBackend(
                spec.endpoint_url, spec.model_id or role, auth_env=spec.auth_env,
                offline=config.offline and not config.cache_dir,
            )
            if config.cache_dir:
                backend = CachedBackend(backend, get_cache(), offline=config.offline)
            return backend
        raise core.ConfigError(f"backends.{role}.kind: {spec.kind!r} is not a chat backend")

    def embedder_for(role: str) -> Optional[Embedder]:
        spec = config.backends.get(role)
        if spec is None:
            return None
        if spec.kind == "fixture":
            return FixtureEmbedder.from_path(spec.fixture_path)
        if spec.kind == "http":
            provider: Embedder = HttpEmbedder(
                spec.endpoint_url, spec.model_id or role, auth_env=spec.auth_env,
                offline=config.offline and not config.cache_dir,
            )
            if config.cache_dir:
                provider = CachedEmbedder(provider, get_cache(), offline=config.offline)
            return provider
        raise core.ConfigError(f"backends.{role}.kind: {spec.kind!r} is not an embedding provider")

    backends = BackendSet(
        perceiver=chat_for("perceiver"),
        reasoner=chat_for("reasoner"),
        evaluator=chat_for("evaluator"),
        explorer=chat_for("explorer"),
        retriever=chat_for("retriever"),
        text_embedder=embedder_for("text_embedder"),
        image_embedder=embedder_for("image_embedder"),
        scripts=scripts,
    )
    return backends
