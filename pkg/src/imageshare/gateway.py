"""Chat-completion gateway: pluggable backends, retries, persistent cache.

Completions are keyed by a content fingerprint of (prompt text, generation
config, backend id). The cache is an append-only JSONL file that survives
process restarts, so re-evaluation of a finished run never touches the
network.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import requests

from .prompts import PromptText

CACHE_FILE = "cache.jsonl"

STAGES = ("stage1", "stage2", "augment", "object_extract")


class BackendUnavailable(RuntimeError):
    pass


class BackendRefusedRequest(RuntimeError):
    """Non-retryable rejection (e.g. HTTP 4xx or an unmatched stub request)."""


class BackendTransientError(RuntimeError):
    """Retryable failure (network error, HTTP 429/5xx)."""


class CacheCorruption(RuntimeError):
    pass


class DuplicateBackendId(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    """Sampling parameters plus the backend the request routes to."""

    max_tokens: int = 1024
    temperature: float = 0.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    stop: tuple[str, ...] = ()
    backend_id: str = "default"

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stop"] = list(self.stop)
        return d


@dataclass(frozen=True)
class CompletionResult:
    text: str
    backend_id: str
    cached: bool
    latency_ms: float
    request_fingerprint: str


def request_fingerprint(prompt_text: str, cfg: GenConfig) -> str:
    """Stable content hash of (prompt text, config, backend id)."""
    payload = json.dumps(
        {"prompt": prompt_text, "config": cfg.to_dict()},
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def default_config(stage: str, backend_id: str = "default") -> GenConfig:
    """Per-stage generation defaults.

    The decision stage samples greedily and stops at the first blank line;
    the description stage samples at temperature 0.9 with presence penalty
    0.4 and top_p 0.95. Moment detection reuses the decision settings, and
    object extraction is greedy with no stop tokens so multi-line dictionary
    answers survive.
    """
    if stage == "stage1" or stage == "augment":
        return GenConfig(
            max_tokens=1024,
            temperature=0.0,
            top_p=1.0,
            frequency_penalty=0.0,
            presence_penalty=0.0,
            stop=("\n\n",),
            backend_id=backend_id,
        )
    if stage == "stage2":
        return GenConfig(
            max_tokens=1024,
            temperature=0.9,
            top_p=0.95,
            frequency_penalty=0.0,
            presence_penalty=0.4,
            stop=(),
            backend_id=backend_id,
        )
    if stage == "object_extract":
        return GenConfig(
            max_tokens=1024,
            temperature=0.0,
            top_p=1.0,
            frequency_penalty=0.0,
            presence_penalty=0.0,
            stop=(),
            backend_id=backend_id,
        )
    raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")


class StubBackend:
    """Deterministic offline backend for tests and dry runs.

    ``behavior`` maps exact request fingerprints or regex patterns (searched
    against the prompt text, in insertion order) to response text; it may
    also be a callable ``(prompt_text, cfg) -> str``. Unmatched requests
    return ``default`` when given, otherwise raise BackendRefusedRequest.
    """

    def __init__(
        self,
        backend_id: str,
        behavior: Mapping[str, str] | Callable[[str, GenConfig], str] | None = None,
        default: str | None = None,
    ):
        self.backend_id = backend_id
        self.behavior = behavior
        self.default = default
        self.request_count = 0

    def complete(self, prompt_text: str, cfg: GenConfig) -> str:
        self.request_count += 1
        if callable(self.behavior):
            return self.behavior(prompt_text, cfg)
        if self.behavior:
            fp = request_fingerprint(prompt_text, cfg)
            if fp in self.behavior:
                return self.behavior[fp]
            for pattern, response in self.behavior.items():
                if re.search(pattern, prompt_text):
                    return response
        if self.default is not None:
            return self.default
        raise BackendRefusedRequest(f"stub {self.backend_id!r}: no behavior matched")


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` client.

    The full prompt travels as a single user message with no system message.
    Base URL and API key fall back to OPENAI_BASE_URL / OPENAI_API_KEY.
    """

    def __init__(
        self,
        backend_id: str,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.backend_id = backend_id
        self.model = model
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("OPENAI_API_KEY", "")
        self.timeout = timeout
        self.session = session or requests.Session()
        self.request_count = 0

    def complete(self, prompt_text: str, cfg: GenConfig) -> str:
        self.request_count += 1
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt_text}],
            "max_tokens": cfg.max_tokens,
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "frequency_penalty": cfg.frequency_penalty,
            "presence_penalty": cfg.presence_penalty,
        }
        if cfg.stop:
            payload["stop"] = list(cfg.stop)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise BackendTransientError(str(e)) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendTransientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendRefusedRequest(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as e:
            raise BackendTransientError(f"malformed response: {e}") from e


class _ResponseCache:
    """Append-only JSONL response cache keyed by request fingerprint."""

    def __init__(self, cache_dir: str | Path | None):
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        self._path: Path | None = None
        if cache_dir is not None:
            cache_dir = Path(cache_dir)
            cache_dir.mkdir(parents=True, exist_ok=True)
            self._path = cache_dir / CACHE_FILE
            if self._path.exists():
                self._load()

    def _load(self) -> None:
        assert self._path is not None
        with open(self._path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    self._entries[obj["fingerprint"]] = obj["response_text"]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise CacheCorruption(f"{self._path}:{line_no}: {e}") from None

    def get(self, fingerprint: str) -> str | None:
        with self._lock:
            return self._entries.get(fingerprint)

    def put(self, fingerprint: str, prompt_text: str, cfg: GenConfig, text: str) -> None:
        with self._lock:
            if fingerprint in self._entries:
                return
            self._entries[fingerprint] = text
            if self._path is not None:
                entry = {
                    "fingerprint": fingerprint,
                    "prompt_sha": hashlib.sha256(prompt_text.encode("utf-8")).hexdigest(),
                    "config": cfg.to_dict(),
                    "response_text": text,
                    "timestamp": time.time(),
                }
                with open(self._path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry, ensure_ascii=False) + "\n")


class LlmGateway:
    """Routes completion requests to registered backends through the cache.

    Transient backend failures retry with exponential backoff up to
    ``max_retries`` attempts; non-retryable rejections propagate untouched.
    At most ``max_in_flight`` requests run concurrently per backend.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
    ):
        self._cache = _ResponseCache(cache_dir)
        self._backends: dict[str, object] = {}
        self._semaphores: dict[str, threading.Semaphore] = {}
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight

    def register_backend(self, backend) -> None:
        if backend.backend_id in self._backends:
            raise DuplicateBackendId(backend.backend_id)
        self._backends[backend.backend_id] = backend
        self._semaphores[backend.backend_id] = threading.Semaphore(self.max_in_flight)

    def register_stub(
        self,
        backend_id: str,
        behavior: Mapping[str, str] | Callable[[str, GenConfig], str] | None = None,
        default: str | None = None,
    ) -> StubBackend:
        stub = StubBackend(backend_id, behavior=behavior, default=default)
        self.register_backend(stub)
        return stub

    def backend(self, backend_id: str):
        return self._backends.get(backend_id)

    def complete(self, prompt: PromptText | str, cfg: GenConfig) -> CompletionResult:
        prompt_text = prompt.text if isinstance(prompt, PromptText) else prompt
        fingerprint = request_fingerprint(prompt_text, cfg)

        cached = self._cache.get(fingerprint)
        if cached is not None:
            return CompletionResult(
                text=cached,
                backend_id=cfg.backend_id,
                cached=True,
                latency_ms=0.0,
                request_fingerprint=fingerprint,
            )

        backend = self._backends.get(cfg.backend_id)
        if backend is None:
            raise BackendUnavailable(f"no backend registered under {cfg.backend_id!r}")

        start = time.perf_counter()
        last_error: Exception | None = None
        semaphore = self._semaphores[cfg.backend_id]
        for attempt in range(self.max_retries):
            try:
                with semaphore:
                    text = backend.complete(prompt_text, cfg)
                break
            except BackendTransientError as e:
                last_error = e
                if attempt < self.max_retries - 1 and self.backoff > 0:
                    time.sleep(self.backoff * 2**attempt)
        else:
            raise BackendUnavailable(f"{cfg.backend_id}: retries exhausted: {last_error}")

        latency_ms = (time.perf_counter() - start) * 1000.0
        self._cache.put(fingerprint, prompt_text, cfg, text)
        return CompletionResult(
            text=text,
            backend_id=cfg.backend_id,
            cached=False,
            latency_ms=latency_ms,
            request_fingerprint=fingerprint,
        )
