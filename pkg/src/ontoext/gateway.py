"""Chat-completion and embedding access for the pipeline agents.

Two backends share one surface:

* :class:`OpenAIBackend` speaks the OpenAI-compatible wire format
  (``/chat/completions`` and ``/embeddings``), which also covers locally
  served open-weight models behind vLLM or similar.
* :class:`ScriptedBackend` answers from fixture files keyed by a hash of the
  request, so tests and offline runs are fully reproducible.

:class:`Gateway` adds retry, rate limiting, the embedding cache and
structured-output re-prompting on top of either backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """The provider could not be reached within the retry budget."""


class ProviderError(GatewayError):
    def __init__(self, message: str, status: int | None = None, body: str = ""):
        self.status = status
        self.body = body[:300]
        detail = f" (status {status})" if status is not None else ""
        super().__init__(f"{message}{detail}{': ' + self.body if self.body else ''}")


class ScriptedMissError(ProviderError):
    pass


class FormatError(GatewayError):
    """Model output carried no payload of the expected shape."""


# --------------------------------------------------------------------------
# configuration and request types
# --------------------------------------------------------------------------


@dataclass
class ProviderConfig:
    """Where and how to reach one model.

    ``api_key_env`` names an environment variable; the key itself is never
    stored on the config.
    """

    model: str
    endpoint: str = "http://localhost:8000/v1"
    kind: str = "openai"  # "openai" or "scripted"
    api_key_env: str | None = None
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 0.5
    requests_per_second: float | None = None
    max_tokens: int = 1024
    dimension: int | None = None
    embed_batch_size: int = 64
    fixtures: str | None = None
    embed_fallback: str | None = None  # scripted only: "trigram"

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retry budget must be >= 0")
        if self.kind not in ("openai", "scripted"):
            raise ValueError(f"unknown provider kind {self.kind!r}")

    def api_key(self) -> str | None:
        if not self.api_key_env:
            return None
        return os.environ.get(self.api_key_env)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ProviderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown provider keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ChatExchange:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int | None = None
    raw_response: str = ""

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise ValueError("prompts must be non-empty")


def request_key(system_prompt: str, user_prompt: str) -> str:
    payload = json.dumps([system_prompt, user_prompt], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------


class _TransientStatus(Exception):
    def __init__(self, response: httpx.Response):
        self.response = response


class OpenAIBackend:
    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = self.config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
            # Azure-style deployments read this header instead
            headers["api-key"] = key
        return headers

    def _post(self, path: str, body: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        response = self.client.post(url, json=body, headers=self._headers())
        if response.status_code == 429 or response.status_code >= 500:
            raise _TransientStatus(response)
        if response.status_code >= 400:
            raise ProviderError(f"{path} rejected", response.status_code, response.text)
        try:
            return response.json()
        except ValueError as exc:
            raise ProviderError(f"{path} returned non-JSON body", response.status_code, response.text) from exc

    def chat(self, exchange: ChatExchange) -> str:
        body = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": exchange.system_prompt},
                {"role": "user", "content": exchange.user_prompt},
            ],
            "temperature": exchange.temperature,
            "max_tokens": exchange.max_tokens or self.config.max_tokens,
        }
        data = self._post("/chat/completions", body)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("malformed chat response", body=json.dumps(data)[:300]) from exc
        return content or ""

    def embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.config.model, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            vectors = [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError("malformed embedding response", body=json.dumps(data)[:300]) from exc
        if len(vectors) != len(texts):
            raise ProviderError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        return vectors


def trigram_embedding(text: str, dimension: int = 256) -> list[float]:
    """Deterministic hashed character-trigram vector (offline stand-in only)."""
    norm = f"  {' '.join(text.lower().split())}  "
    vec = np.zeros(dimension)
    for i in range(len(norm) - 2):
        digest = hashlib.blake2b(norm[i : i + 3].encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        vec[h % dimension] += 1.0 if (h >> 32) & 1 else -1.0
    if not vec.any():
        vec[0] = 1.0
    return (vec / np.linalg.norm(vec)).tolist()


class ScriptedBackend:
    """Fixture-driven backend.

    Chat replies are looked up by :func:`request_key` of the two prompts,
    embeddings by exact text. A fixture directory holds ``chat/<key>.txt``
    and ``embed/<sha256(text)>.json`` files. ``responder`` is consulted for
    chat requests that have no fixture; with ``record`` set its answers (and
    fallback embeddings) are kept so :meth:`save` can persist them.
    """

    def __init__(
        self,
        replies: Mapping[str, str] | None = None,
        embeddings: Mapping[str, Sequence[float]] | None = None,
        responder: Callable[[ChatExchange], str] | None = None,
        embed_fallback: str | None = None,
        fixtures_dir: str | os.PathLike | None = None,
        record: bool = False,
    ):
        self.replies: dict[str, str] = dict(replies or {})
        self.embeddings: dict[str, list[float]] = {k: list(v) for k, v in (embeddings or {}).items()}
        self.responder = responder
        self.embed_fallback = embed_fallback
        self.fixtures_dir = Path(fixtures_dir) if fixtures_dir else None
        self.record = record
        self.chat_calls = 0
        self.embed_calls = 0

    def add_reply(self, system_prompt: str, user_prompt: str, reply: str) -> None:
        self.replies[request_key(system_prompt, user_prompt)] = reply

    def add_embedding(self, text: str, vector: Sequence[float]) -> None:
        self.embeddings[text] = list(map(float, vector))

    def save(self, directory: str | os.PathLike) -> None:
        root = Path(directory)
        (root / "chat").mkdir(parents=True, exist_ok=True)
        (root / "embed").mkdir(parents=True, exist_ok=True)
        for key, reply in sorted(self.replies.items()):
            (root / "chat" / f"{key}.txt").write_text(reply, encoding="utf-8")
        for text, vec in sorted(self.embeddings.items()):
            payload = {"text": text, "embedding": vec}
            (root / "embed" / f"{text_key(text)}.json").write_text(json.dumps(payload), encoding="utf-8")

    def chat(self, exchange: ChatExchange) -> str:
        self.chat_calls += 1
        key = request_key(exchange.system_prompt, exchange.user_prompt)
        if key in self.replies:
            return self.replies[key]
        if self.fixtures_dir is not None:
            path = self.fixtures_dir / "chat" / f"{key}.txt"
            if path.exists():
                return path.read_text(encoding="utf-8")
        if self.responder is not None:
            reply = self.responder(exchange)
            if self.record:
                self.replies[key] = reply
            return reply
        raise ScriptedMissError(f"no scripted reply for request {key[:12]}")

    def embed(self, texts: list[str]) -> list[list[float]]:
        self.embed_calls += 1
        out = []
        for text in texts:
            if text in self.embeddings:
                out.append(self.embeddings[text])
                continue
            if self.fixtures_dir is not None:
                path = self.fixtures_dir / "embed" / f"{text_key(text)}.json"
                if path.exists():
                    out.append(json.loads(path.read_text(encoding="utf-8"))["embedding"])
                    continue
            if self.embed_fallback == "trigram":
                vec = trigram_embedding(text)
                if self.record:
                    self.embeddings[text] = vec
                out.append(vec)
                continue
            raise ScriptedMissError(f"no scripted embedding for {text!r}")
        return out


# --------------------------------------------------------------------------
# structured output
# --------------------------------------------------------------------------


class Shape:
    MAPPING_OF_LISTS = "mapping_of_lists"
    LIST_OF_STRINGS = "list_of_strings"


@dataclass(frozen=True)
class Label:
    """A closed label set; ``aliases`` maps lowercase surface forms to labels."""

    aliases: Mapping[str, str]

    @property
    def choices(self) -> list[str]:
        return sorted(set(self.aliases.values()))


_FENCE_RE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)
_DECODER = json.JSONDecoder()


def _as_str_list(value: Any) -> list[str] | None:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [str(value)]
    if isinstance(value, list):
        out = []
        for item in value:
            if isinstance(item, str):
                out.append(item)
            elif isinstance(item, (int, float)) and not isinstance(item, bool):
                out.append(str(item))
            else:
                return None
        return out
    return None


def _coerce(value: Any, shape: str) -> Any:
    if shape == Shape.MAPPING_OF_LISTS:
        if not isinstance(value, dict):
            return None
        out = {}
        for k, v in value.items():
            items = _as_str_list(v)
            if items is None:
                return None
            out[k] = items
        return out
    if shape == Shape.LIST_OF_STRINGS:
        if isinstance(value, dict) and len(value) == 1:
            value = next(iter(value.values()))
        if not isinstance(value, list):
            return None
        return _as_str_list(value)
    raise ValueError(f"unknown shape {shape!r}")


def _scan_json(text: str, shape: str) -> Any:
    for m in re.finditer(r"[\[{]", text):
        try:
            value, _ = _DECODER.raw_decode(text, m.start())
        except ValueError:
            continue
        coerced = _coerce(value, shape)
        if coerced is not None:
            return coerced
    return None


def _parse_label(raw: str, label: Label) -> str:
    best: tuple[int, int, str] | None = None
    for alias, canonical in label.aliases.items():
        m = re.search(rf"(?<![\w-]){re.escape(alias)}(?![\w-])", raw, re.IGNORECASE)
        if m and (best is None or (m.start(), -len(alias)) < (best[0], best[1])):
            best = (m.start(), -len(alias), canonical)
    if best is None:
        raise FormatError(f"no label from {label.choices} in output: {raw[:120]!r}")
    return best[2]


def parse_structured(raw: str, shape: str | Label) -> Any:
    """Pull the first payload of ``shape`` out of free-form model output.

    Code fences are stripped and surrounding prose is ignored. Labels are
    matched case-insensitively through the alias table, earliest mention wins.

    Raises:
        FormatError: nothing of the expected shape was found.
    """
    if isinstance(shape, Label):
        return _parse_label(raw, shape)
    try:
        coerced = _coerce(json.loads(raw), shape)
        if coerced is not None:
            return coerced
    except ValueError:
        pass
    for block in _FENCE_RE.findall(raw):
        found = _scan_json(block, shape)
        if found is not None:
            return found
    found = _scan_json(raw, shape)
    if found is not None:
        return found
    raise FormatError(f"no {shape} payload in output: {raw[:120]!r}")


# --------------------------------------------------------------------------
# gateway
# --------------------------------------------------------------------------


class TokenBucket:
    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
            self.updated = now
            if self.tokens < 1.0:
                wait = (1.0 - self.tokens) / self.rate
                self.sleep(wait)
                self.updated = self.clock()
                self.tokens = 1.0
            self.tokens -= 1.0


FORMAT_REMINDER = (
    "\n\nYour previous reply could not be parsed. Reply with only the requested "
    "JSON, with no commentary."
)


@dataclass
class Gateway:
    """Retrying, rate-limited, caching front for a backend."""

    config: ProviderConfig
    backend: Any = None
    sleep: Callable[[float], None] = time.sleep
    reprompts: int = 2
    _cache: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)
    _cache_lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)
    _bucket: TokenBucket | None = field(default=None, init=False, repr=False)
    _dimension: int | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.backend is None:
            if self.config.kind == "scripted":
                self.backend = ScriptedBackend(
                    fixtures_dir=self.config.fixtures, embed_fallback=self.config.embed_fallback
                )
            else:
                self.backend = OpenAIBackend(self.config)
        self._dimension = self.config.dimension
        if self.config.requests_per_second:
            self._bucket = TokenBucket(self.config.requests_per_second, sleep=self.sleep)

    def _call(self, what: str, fn: Callable[[], Any]) -> Any:
        attempts = self.config.retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if self._bucket is not None:
                self._bucket.acquire()
            try:
                return fn()
            except httpx.TransportError as exc:
                last = exc
                logger.warning("%s to %s failed (attempt %d/%d): %s", what, self.config.model, attempt + 1, attempts, type(exc).__name__)
            except _TransientStatus as exc:
                last = exc
                logger.warning("%s to %s got status %d (attempt %d/%d)", what, self.config.model, exc.response.status_code, attempt + 1, attempts)
            if attempt + 1 < attempts:
                self.sleep(self.config.backoff * 2**attempt)
        if isinstance(last, _TransientStatus):
            raise ProviderError(f"{what} failed after {attempts} attempts", last.response.status_code, last.response.text)
        raise TransportError(f"{what} to {self.config.endpoint} failed after {attempts} attempts") from last

    def complete(self, exchange: ChatExchange) -> str:
        reply = self._call("chat", lambda: self.backend.chat(exchange))
        exchange.raw_response = reply
        return reply

    def complete_structured(self, exchange: ChatExchange, shape: str | Label) -> Any:
        """Complete and parse, re-prompting with a format reminder on failure."""
        current = exchange
        for attempt in range(self.reprompts + 1):
            raw = self.complete(current)
            try:
                return parse_structured(raw, shape)
            except FormatError:
                if attempt == self.reprompts:
                    raise
                logger.info("unparseable reply, re-prompting (%d/%d)", attempt + 1, self.reprompts)
                current = ChatExchange(
                    exchange.system_prompt,
                    exchange.user_prompt + FORMAT_REMINDER * (attempt + 1),
                    exchange.temperature,
                    exchange.max_tokens,
                )

    def _check(self, vec: list[float]) -> np.ndarray:
        arr = np.asarray(vec, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ProviderError("embedding is not a non-empty vector")
        # the first vector fixes the dimension unless the config pins it
        if self._dimension is None:
            self._dimension = arr.size
        elif arr.size != self._dimension:
            raise ProviderError(f"embedding dimension {arr.size}, expected {self._dimension}")
        return arr

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        """Embed several texts, fetching only cache misses (batched)."""
        for text in texts:
            if not text.strip():
                raise ValueError("cannot embed empty text")
        with self._cache_lock:
            missing = list(dict.fromkeys(t for t in texts if t not in self._cache))
        size = max(1, self.config.embed_batch_size)
        for start in range(0, len(missing), size):
            batch = missing[start : start + size]
            vectors = self._call("embed", lambda b=batch: self.backend.embed(b))
            checked = [self._check(v) for v in vectors]
            with self._cache_lock:
                for text, vec in zip(batch, checked):
                    self._cache.setdefault(text, vec)
        with self._cache_lock:
            return [self._cache[t] for t in texts]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    @property
    def cache_size(self) -> int:
        return len(self._cache)
