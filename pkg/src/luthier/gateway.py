"""Client for chat-completion HTTP endpoints.

One gateway instance is shared by every pipeline stage. It caps in-flight
requests, retries transient failures (HTTP 429/5xx, timeouts) with exponential
backoff plus jitter, and builds byte-identical request bodies for identical
inputs so responses can be cached to disk and replayed hermetically.

Credentials come only from the environment (``LUTHIER_API_KEY``,
``LUTHIER_BASE_URL``), never from config files.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

__all__ = [
    "GatewayError",
    "RetryExhaustedError",
    "RequestRejectedError",
    "MalformedResponseError",
    "ReplayMissError",
    "VerdictError",
    "ChatMessage",
    "ChatRequest",
    "GatewayConfig",
    "JudgeVerdict",
    "Gateway",
    "parse_verdict",
    "ENV_API_KEY",
    "ENV_BASE_URL",
]

ENV_API_KEY = "LUTHIER_API_KEY"
ENV_BASE_URL = "LUTHIER_BASE_URL"

VALID_ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base class for transport, protocol, and replay failures."""


class RetryExhaustedError(GatewayError):
    """Transient failures persisted past the retry budget."""


class RequestRejectedError(GatewayError):
    """Non-retryable HTTP 4xx answer."""


class MalformedResponseError(GatewayError):
    """Response body does not follow the chat-completion schema."""


class ReplayMissError(GatewayError):
    """Replay mode found no cached response for the request."""


class VerdictError(GatewayError):
    """Judge reply is neither True nor False."""

    def __init__(self, raw: str):
        super().__init__(f"unparseable judge verdict: {raw!r}")
        self.raw = raw


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.model:
            raise GatewayError("model identifier must be non-empty")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise GatewayError("max_tokens must be positive")
        if not self.messages:
            raise GatewayError("request needs at least one message")
        for i, message in enumerate(self.messages):
            if message.role not in VALID_ROLES:
                raise GatewayError(f"message {i} has invalid role {message.role!r}")
            if not message.content:
                raise GatewayError(f"message {i} has empty content")
            if message.role == "system" and i != 0:
                raise GatewayError("only the first message may be a system message")
        if not any(m.role == "user" for m in self.messages):
            raise GatewayError("request needs at least one user message")

    def canonical_body(self) -> bytes:
        """Stable field order, stable separators: identical inputs, identical bytes."""
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    def cache_key(self) -> str:
        return hashlib.sha256(self.canonical_body()).hexdigest()


@dataclass
class GatewayConfig:
    base_url: str = ""
    api_key: str = ""
    max_concurrent: int = 8
    retry_max: int = 5
    backoff_base_ms: int = 500
    timeout_s: int = 120

    def __post_init__(self) -> None:
        for name in ("max_concurrent", "retry_max", "backoff_base_ms", "timeout_s"):
            if getattr(self, name) <= 0:
                raise GatewayError(f"{name} must be positive")

    @classmethod
    def from_env(cls, **overrides) -> "GatewayConfig":
        overrides.setdefault("base_url", os.environ.get(ENV_BASE_URL, ""))
        overrides.setdefault("api_key", os.environ.get(ENV_API_KEY, ""))
        return cls(**overrides)


@dataclass(frozen=True)
class JudgeVerdict:
    keep: bool
    raw: str


def parse_verdict(raw: str) -> JudgeVerdict:
    """Strict contract: the trimmed, case-folded reply must be true or false."""
    normalized = raw.strip().casefold()
    if normalized == "true":
        return JudgeVerdict(keep=True, raw=raw)
    if normalized == "false":
        return JudgeVerdict(keep=False, raw=raw)
    raise VerdictError(raw)


RETRYABLE_STATUSES = frozenset({429} | set(range(500, 600)))

REPLAY_MODES = ("off", "record", "replay")


class Gateway:
    """Thread-safe chat-completion client with retry, rate cap, and replay."""

    def __init__(
        self,
        config: GatewayConfig,
        *,
        replay_mode: str = "off",
        replay_dir: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        if replay_mode not in REPLAY_MODES:
            raise GatewayError(f"replay_mode must be one of {REPLAY_MODES}")
        if replay_mode != "off" and replay_dir is None:
            raise GatewayError("record/replay modes need a replay_dir")
        self.config = config
        self.replay_mode = replay_mode
        self.replay_dir = Path(replay_dir) if replay_dir else None
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore = threading.BoundedSemaphore(config.max_concurrent)
        self._client: httpx.Client | None = None
        self._client_lock = threading.Lock()
        self._transport = transport
        if self.replay_dir is not None:
            self.replay_dir.mkdir(parents=True, exist_ok=True)

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def complete(self, request: ChatRequest) -> str:
        """Return the assistant content of the first choice."""
        if self.replay_mode == "replay":
            return self._read_cache(request)
        content = self._complete_live(request)
        if self.replay_mode == "record":
            self._write_cache(request, content)
        return content

    # -- live path ---------------------------------------------------------

    def _http_client(self) -> httpx.Client:
        with self._client_lock:
            if self._client is None:
                if not self.config.base_url:
                    raise GatewayError(
                        f"no base URL configured; set {ENV_BASE_URL} or the config file"
                    )
                headers = {"Content-Type": "application/json"}
                if self.config.api_key:
                    headers["Authorization"] = f"Bearer {self.config.api_key}"
                self._client = httpx.Client(
                    base_url=self.config.base_url,
                    headers=headers,
                    timeout=self.config.timeout_s,
                    transport=self._transport,
                )
            return self._client

    def _complete_live(self, request: ChatRequest) -> str:
        client = self._http_client()
        body = request.canonical_body()
        last_error: Exception | None = None
        for attempt in range(self.config.retry_max + 1):
            if attempt:
                self._sleep(self._backoff_seconds(attempt))
            try:
                with self._semaphore:
                    response = client.post("/chat/completions", content=body)
            except httpx.TimeoutException as exc:
                last_error = exc
                continue
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code in RETRYABLE_STATUSES:
                last_error = GatewayError(f"HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise RequestRejectedError(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
            return _extract_content(response)
        raise RetryExhaustedError(
            f"gave up after {self.config.retry_max} retries: {last_error}"
        )

    def _backoff_seconds(self, attempt: int) -> float:
        base = self.config.backoff_base_ms / 1000.0
        # jitter multiplies upward so consecutive retries stay >= base apart
        return base * (2 ** (attempt - 1)) * (1.0 + self._rng.random())

    # -- record / replay -----------------------------------------------------

    def _cache_path(self, request: ChatRequest) -> Path:
        assert self.replay_dir is not None
        return self.replay_dir / f"{request.cache_key()}.json"

    def _write_cache(self, request: ChatRequest, content: str) -> None:
        path = self._cache_path(request)
        record = {
            "request": json.loads(request.canonical_body()),
            "response_content": content,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, ensure_ascii=False, indent=1), encoding="utf-8")
        tmp.replace(path)

    def _read_cache(self, request: ChatRequest) -> str:
        path = self._cache_path(request)
        if not path.exists():
            raise ReplayMissError(f"no cached response for request {request.cache_key()}")
        record = json.loads(path.read_text(encoding="utf-8"))
        return record["response_content"]


def _extract_content(response: httpx.Response) -> str:
    try:
        payload = response.json()
    except (json.JSONDecodeError, ValueError) as exc:
        raise MalformedResponseError(f"response body is not JSON: {exc}") from exc
    try:
        choices = payload["choices"]
        content = choices[0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(
            f"response missing choices[0].message.content: {str(payload)[:200]}"
        ) from exc
    if not isinstance(content, str):
        raise MalformedResponseError("message content is not a string")
    return content


def simple_request(
    model: str,
    system: str | None,
    user_turns: Sequence[str] | str,
    *,
    history: Sequence[ChatMessage] = (),
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> ChatRequest:
    """Assemble a request from a system prompt, prior turns, and user content."""
    messages: list[ChatMessage] = []
    if system:
        messages.append(ChatMessage(role="system", content=system))
    messages.extend(history)
    if isinstance(user_turns, str):
        user_turns = [user_turns]
    messages.extend(ChatMessage(role="user", content=t) for t in user_turns)
    return ChatRequest(
        model=model,
        messages=tuple(messages),
        temperature=temperature,
        max_tokens=max_tokens,
    )
